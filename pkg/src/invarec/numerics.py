"""Dense numerical core.

Tensors are ``torch`` tensors in float64 by default; reverse-mode gradients
come from ``torch.autograd`` (rebuilt per batch, define-by-run). Adam, the
reparameterized Gaussian sampler and the finite-difference oracle live here.
All randomness flows through explicit :class:`RngStream` objects.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

_DTYPE = torch.float64

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""


def dtype() -> torch.dtype:
    return _DTYPE


def set_precision(bits: int) -> None:
    """Switch the working precision (64 by default, 32 is opt-in)."""
    global _DTYPE
    if bits == 64:
        _DTYPE = torch.float64
    elif bits == 32:
        _DTYPE = torch.float32
    else:
        raise ValueError(f"unsupported precision: {bits} bits")


def tensor(data, shape: Sequence[int] | None = None) -> torch.Tensor:
    out = torch.as_tensor(data, dtype=_DTYPE)
    if shape is not None:
        out = out.reshape(tuple(shape))
    return out


def assert_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def _derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


class RngStream:
    """Seeded random stream backed by a CPU Mersenne-Twister generator.

    Child streams are derived by name, so adding a new consumer never shifts
    the samples seen by existing ones.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = torch.Generator(device="cpu")
        self.generator.manual_seed(self.seed)

    def spawn(self, name: str) -> "RngStream":
        return RngStream(_derive_seed(self.seed, name))

    def normal(self, shape: Sequence[int]) -> torch.Tensor:
        return torch.randn(tuple(shape), generator=self.generator, dtype=_DTYPE)

    def uniform(self, shape: Sequence[int]) -> torch.Tensor:
        return torch.rand(tuple(shape), generator=self.generator, dtype=_DTYPE)

    def randint(self, low: int, high: int, shape: Sequence[int]) -> torch.Tensor:
        return torch.randint(low, high, tuple(shape), generator=self.generator)

    def permutation(self, n: int) -> torch.Tensor:
        return torch.randperm(n, generator=self.generator)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed})"


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    # torch evaluates this branch-wise, so it saturates without overflow
    return torch.sigmoid(x)


def softplus(x: torch.Tensor) -> torch.Tensor:
    """ln(1 + e^x), stable for large |x|."""
    return torch.nn.functional.softplus(x)


def backward(loss: torch.Tensor, params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. every tensor in ``params``.

    Parameters the loss does not depend on get an all-zero gradient.
    """
    if loss.dim() != 0 and loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    assert_finite(loss.detach(), "loss")
    params = list(params)
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    out = []
    for p, g in zip(params, grads):
        if g is None:
            g = torch.zeros_like(p)
        assert_finite(g, "gradient")
        out.append(g)
    return out


@dataclass
class AdamState:
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls(
            exp_avg=[torch.zeros_like(p) for p in params],
            exp_avg_sq=[torch.zeros_like(p) for p in params],
        )


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Weight decay is classic L2: ``weight_decay * p`` is added to the gradient
    before the moment updates.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if weight_decay < 0:
        raise ValueError("weight_decay must be non-negative")
    if not (len(params) == len(grads) == len(state.exp_avg) == len(state.exp_avg_sq)):
        raise ValueError("params, grads and optimizer state differ in length")

    state.step += 1
    bias1 = 1.0 - ADAM_BETA1**state.step
    bias2 = 1.0 - ADAM_BETA2**state.step
    step_size = lr / bias1
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
            if p.shape != g.shape or p.shape != m.shape:
                raise ValueError(
                    f"shape mismatch: param {tuple(p.shape)} vs grad {tuple(g.shape)}"
                )
            if weight_decay:
                g = g + weight_decay * p
            m.mul_(ADAM_BETA1).add_(g, alpha=1.0 - ADAM_BETA1)
            v.mul_(ADAM_BETA2).addcmul_(g, g, value=1.0 - ADAM_BETA2)
            denom = (v / bias2).sqrt_().add_(ADAM_EPS)
            p.addcdiv_(m, denom, value=-step_size)
    return state


def reparameterize(mu: torch.Tensor, sigma: torch.Tensor, rng: RngStream) -> torch.Tensor:
    """Sample ``mu + eps * sigma`` with ``eps ~ N(0, I)`` drawn from ``rng``."""
    if mu.shape != sigma.shape:
        raise ValueError(f"mu {tuple(mu.shape)} and sigma {tuple(sigma.shape)} differ")
    if bool((sigma < 0).any()):
        raise ValueError("sigma must be elementwise non-negative")
    eps = rng.normal(mu.shape).to(mu.dtype)
    return mu + eps * sigma


@dataclass
class GradCheck:
    """Outcome of comparing autograd against central finite differences."""

    max_rel_error: float
    max_abs_error: float
    n_checked: int
    worst: str

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor] | Sequence[torch.Tensor],
    step: float = 1e-5,
    floor: float = 1e-6,
) -> GradCheck:
    """Central-difference oracle for every entry of every parameter.

    ``loss_fn`` must be a pure function of the current parameter values
    (fixed batch, fixed noise). The relative error of each entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    if not isinstance(params, dict):
        params = {f"param{i}": p for i, p in enumerate(params)}
    names = list(params)
    tensors = [params[n] for n in names]
    analytic = backward(loss_fn(), tensors)

    worst_rel, worst_abs, worst, count = 0.0, 0.0, "", 0
    with torch.no_grad():
        for name, p, g in zip(names, tensors, analytic):
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * step)
                a = gflat[i].item()
                abs_err = abs(a - numeric)
                rel = abs_err / max(abs(a), abs(numeric), floor)
                count += 1
                if rel > worst_rel:
                    worst_rel, worst = rel, f"{name}[{i}]"
                worst_abs = max(worst_abs, abs_err)
    if math.isnan(worst_rel):
        raise NonFiniteError("finite-difference check produced NaN")
    return GradCheck(worst_rel, worst_abs, count, worst)
