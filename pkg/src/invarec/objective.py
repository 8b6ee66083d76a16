"""Invariant-representation objective with an adjustment and a confounder encoder.

Training sees both representations: the adjustment embedding ``t`` (Gaussian,
reparameterized, or deterministic ``t = mu``) and the confounder embedding
``s``. The loss is

    (1 - gamma) H(y|t) - (gamma - alpha) H(y|s) + gamma H(y|t,s) + beta ||mu||^2

where each ``H`` is a mean BPR loss over sampled negatives. At inference only
the adjustment path runs, deterministically; ``s`` is never computed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
from torch import nn

from . import numerics
from .model import (
    EmbeddingTable,
    build_encoder,
    encode,
    init_parameters,
    mean_bpr,
    score_items,
)
from .numerics import RngStream

TERMS = ("a", "b", "c", "d")
FUSIONS = ("sum", "concat")
SIGMA_INIT = 0.1


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.01
    gamma: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.alpha > self.gamma:
            warnings.warn("alpha > gamma flips the sign of the confounder-only term",
                          stacklevel=2)


@dataclass
class StochasticEmbedding:
    mu: torch.Tensor
    sigma: torch.Tensor | None  # None means deterministic mode (sigma == 0)
    t: torch.Tensor

    @property
    def deterministic(self) -> bool:
        return self.sigma is None


@dataclass
class DualRepresentation:
    adjustment: StochasticEmbedding
    confounder: torch.Tensor | None

    @property
    def t(self) -> torch.Tensor:
        return self.adjustment.t

    @property
    def s(self) -> torch.Tensor | None:
        return self.confounder


@dataclass
class LossBreakdown:
    term_a: torch.Tensor
    term_b: torch.Tensor
    term_c: torch.Tensor
    term_d: torch.Tensor
    total: torch.Tensor

    def record(self, step: int | None = None) -> dict:
        rec = {} if step is None else {"step": step}
        for name in ("term_a", "term_b", "term_c", "term_d", "total"):
            rec[name] = float(getattr(self, name).detach())
        return rec


def compression_term(emb: StochasticEmbedding) -> torch.Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)), averaged over any leading batch dims.

    Deterministic mode reduces to ``0.5 * ||mu||^2``.
    """
    kl = 0.5 * (emb.mu * emb.mu).sum(-1)
    if emb.sigma is not None:
        if bool((emb.sigma == 0).any()):
            raise ValueError("sigma has exact zeros; ln(sigma^2) is undefined. "
                             "Use deterministic mode for sigma == 0.")
        var = emb.sigma * emb.sigma
        kl = kl + 0.5 * (var - torch.log(var) - 1.0).sum(-1)
    return kl.mean() if kl.dim() else kl


def conditional_bpr(target: torch.Tensor, negatives: torch.Tensor, reps: DualRepresentation,
                    tables: EmbeddingTable, which: str, fuse: nn.Module | None = None
                    ) -> torch.Tensor:
    """Mean BPR of ``target`` against ``negatives`` scored from t, s or (t, s)."""
    if negatives.numel() == 0:
        raise ValueError("empty negative set")
    if which == "t":
        h = reps.t
    elif which == "s":
        h = reps.s
    elif which == "ts":
        h = reps.t + reps.s if fuse is None else fuse(torch.cat([reps.t, reps.s], -1))
    else:
        raise ValueError(f"which must be 't', 's' or 'ts', got {which!r}")
    if h is None:
        raise ValueError("confounder representation is not available")
    single = h.dim() == 1
    if single:
        h, target, negatives = h[None], target.reshape(1), negatives.reshape(1, -1)
    elif negatives.dim() == 1:
        negatives = negatives[:, None]
    return mean_bpr(h, tables, target, negatives)


def total_loss(parts: dict, comp, w: LossWeights,
               disabled: frozenset[str] | set[str] = frozenset()) -> LossBreakdown:
    """Assemble the four weighted terms.

    ``parts`` maps ``"t"``, ``"s"``, ``"ts"`` to the conditional BPR values and
    ``comp`` is ``||mu||^2`` (or twice the Gaussian KL in stochastic mode).
    A term that is disabled, has a zero coefficient, or has no input is an
    exact zero and contributes nothing to the gradient.
    """
    zero = torch.zeros((), dtype=numerics.dtype())

    def term(name, coef, value):
        if name in disabled or coef == 0 or value is None:
            return zero
        return coef * torch.as_tensor(value, dtype=numerics.dtype())

    a = term("a", 1.0 - w.gamma, parts.get("t"))
    b = term("b", w.gamma - w.alpha, parts.get("s"))
    c = term("c", w.gamma, parts.get("ts"))
    d = term("d", w.beta, comp)
    return LossBreakdown(a, b, c, d, a - b + c + d)


def _softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


class InvariantRecommender(nn.Module):
    """Shared item/position tables, adjustment encoder f_theta, confounder encoder f_phi.

    Parameters are registered (and initialised) tables first, then f_theta, so
    a model built from the same seed starts from the same tables and f_theta as
    :class:`~invarec.model.SequentialRecommender`.
    """

    def __init__(self, n_items: int, d: int = 64, n_max: int = 20,
                 encoder: str = "self-attention-bidirectional",
                 confounder_encoder: str | None = None, n_layers: int = 2,
                 n_heads: int = 2, stochastic: bool = False, fusion: str = "sum"):
        super().__init__()
        if fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        dt = numerics.dtype()
        self.tables = EmbeddingTable(n_items, d, n_max)
        self.f_theta = build_encoder(encoder, d, n_layers, n_heads)
        self.f_phi = build_encoder(confounder_encoder or encoder, d, n_layers, n_heads)
        self.sigma_head = nn.Linear(d, d, dtype=dt)
        self.fuse = nn.Linear(2 * d, d, dtype=dt) if fusion == "concat" else None
        self.stochastic = stochastic

    def init(self, rng: RngStream) -> "InvariantRecommender":
        init_parameters(self.tables, rng.spawn("tables"))
        init_parameters(self.f_theta, rng.spawn("f_theta"))
        init_parameters(self.f_phi, rng.spawn("f_phi"))
        init_parameters(self.sigma_head, rng.spawn("sigma_head"))
        with torch.no_grad():
            self.sigma_head.weight.mul_(0.01)
            self.sigma_head.bias.fill_(_softplus_inverse(SIGMA_INIT))
        if self.fuse is not None:
            init_parameters(self.fuse, rng.spawn("fuse"))
        return self

    def adjustment_forward(self, items: torch.Tensor, rng: RngStream | None = None,
                           deterministic: bool | None = None) -> StochasticEmbedding:
        if deterministic is None:
            deterministic = not self.stochastic
        mu = encode(self.tables(items), self.f_theta, items != 0)
        if deterministic:
            return StochasticEmbedding(mu, None, mu)
        if rng is None:
            raise ValueError("stochastic mode needs an RngStream")
        sigma = numerics.softplus(self.sigma_head(mu))
        return StochasticEmbedding(mu, sigma, numerics.reparameterize(mu, sigma, rng))

    def confounder_forward(self, items: torch.Tensor) -> torch.Tensor:
        return encode(self.tables(items), self.f_phi, items != 0)

    def represent(self, items: torch.Tensor) -> torch.Tensor:
        return self.adjustment_forward(items, deterministic=True).mu

    def inference_scores(self, items: torch.Tensor) -> torch.Tensor:
        """Scores from the adjustment path only, with t = mu(x)."""
        return score_items(self.represent(items), self.tables)

    def loss(self, items, pos, neg, weights: LossWeights, rng: RngStream | None = None,
             disabled=frozenset(), detach_confounder: bool = False,
             block_confounder_grad: bool = False) -> LossBreakdown:
        """Training loss on a batch; all three BPR terms share the same negatives.

        ``detach_confounder`` skips the confounder encoder entirely (its terms
        become zero). ``block_confounder_grad`` keeps term (b) but stops its
        gradient from reaching f_phi.
        """
        emb = self.adjustment_forward(items, rng)
        need = {
            "t": "a" not in disabled and weights.gamma != 1.0,
            "s": "b" not in disabled and weights.gamma != weights.alpha,
            "ts": "c" not in disabled and weights.gamma != 0.0,
        }
        s = None
        if not detach_confounder and (need["s"] or need["ts"]):
            s = self.confounder_forward(items)
        reps = DualRepresentation(emb, s)
        parts = {}
        if need["t"]:
            parts["t"] = conditional_bpr(pos, neg, reps, self.tables, "t")
        if s is not None and need["s"]:
            s_only = DualRepresentation(emb, s.detach()) if block_confounder_grad else reps
            parts["s"] = conditional_bpr(pos, neg, s_only, self.tables, "s")
        if s is not None and need["ts"]:
            parts["ts"] = conditional_bpr(pos, neg, reps, self.tables, "ts", self.fuse)
        comp = None
        if "d" not in disabled and weights.beta != 0:
            comp = 2.0 * compression_term(emb)
        return total_loss(parts, comp, weights, disabled)


def monte_carlo_kl(mu: torch.Tensor, sigma: torch.Tensor, n: int, rng: RngStream,
                   chunk: int = 250_000) -> float:
    """Sample estimate of KL(N(mu, diag sigma^2) || N(0, I)) from ``n`` draws."""
    total = 0.0
    done = 0
    log_sigma = torch.log(sigma).sum()
    while done < n:
        m = min(chunk, n - done)
        eps = rng.normal((m, mu.numel()))
        t = mu + sigma * eps
        # log q - log p; the 2*pi constants cancel
        total += float((0.5 * (t * t - eps * eps).sum(-1) - log_sigma).sum())
        done += m
    return total / n


def toy_gradient_check(encoder: str = "self-attention-bidirectional", seed: int = 0,
                       n_items: int = 20, d: int = 8, n_max: int = 5,
                       stochastic: bool = True, fusion: str = "sum") -> numerics.GradCheck:
    """Central differences vs autograd for the full four-term loss on a toy model."""
    rng = RngStream(seed)
    model = InvariantRecommender(n_items, d, n_max, encoder, stochastic=stochastic,
                                 fusion=fusion).init(rng.spawn("init"))
    data = rng.spawn("data")
    items = data.randint(1, n_items + 1, (4, n_max))
    for row, n_pad in enumerate((0, 1, 3, 4)):
        items[row, :n_pad] = 0
    pos = data.randint(1, n_items + 1, (4,))
    neg = data.randint(1, n_items + 1, (4, 2))
    weights = LossWeights(alpha=0.1, beta=0.05, gamma=0.5)
    noise_seed = rng.spawn("noise").seed

    def loss():
        return model.loss(items, pos, neg, weights, RngStream(noise_seed)).total

    return numerics.finite_difference_check(loss, dict(model.named_parameters()))
