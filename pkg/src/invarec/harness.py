"""Training loop, full-catalog leave-one-out evaluation and the ablation runner."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch

from . import numerics
from .data import DatasetSplits, SequenceExample
from .model import SequentialRecommender, read_checkpoint, save_checkpoint, trim_padding
from .numerics import AdamState, NonFiniteError, RngStream
from .objective import InvariantRecommender, LossWeights

log = logging.getLogger(__name__)

KS = (5, 10, 20)
LR_GRID = (1e-3, 5e-4, 1e-4)
WEIGHT_DECAY_GRID = (1e-4, 1e-6, 1e-8, 0.0)
ABLATIONS = (
    ("raw", ()),
    ("w/o (1)", ("a",)),
    ("w/o (2)", ("b",)),
    ("w/o (3)", ("c",)),
)


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss or gradient at step {step}: {detail}")
        self.step = step


@dataclass
class TrainConfig:
    objective: str = "framework"  # "framework" or "base"
    encoder: str = "self-attention-bidirectional"
    confounder_encoder: str | None = None
    d: int = 64
    batch_size: int = 256
    n_max: int = 20
    lr: float = 1e-3
    weight_decay: float = 0.0
    alpha: float = 0.1
    beta: float = 0.01
    gamma: float = 0.5
    n_layers: int = 2
    n_heads: int = 2
    n_negatives: int = 1
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    disabled_terms: tuple[str, ...] = ()
    stochastic: bool = False
    fusion: str = "sum"
    detach_confounder: bool = False
    block_confounder_grad: bool = False
    mask_history: bool = False
    eval_batch_size: int = 1024

    def __post_init__(self):
        if self.objective not in ("framework", "base"):
            raise ValueError(f"objective must be 'framework' or 'base', got {self.objective!r}")
        self.disabled_terms = tuple(sorted(set(self.disabled_terms)))
        bad = set(self.disabled_terms) - {"a", "b", "c", "d"}
        if bad:
            raise ValueError(f"unknown loss terms {sorted(bad)}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be > 0 and weight_decay >= 0")
        if self.batch_size < 1 or self.n_negatives < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, n_negatives and max_epochs must be >= 1")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["disabled_terms"] = list(self.disabled_terms)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        if "disabled_terms" in kw:
            kw["disabled_terms"] = tuple(kw["disabled_terms"])
        return cls(**kw)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})


@dataclass
class EvalReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    config: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        for metric in (self.hr, self.ndcg):
            vals = [metric[k] for k in sorted(metric)]
            if any(not 0.0 <= v <= 1.0 for v in vals):
                raise ValueError("metric outside [0, 1]")
            if any(a > b for a, b in zip(vals, vals[1:])):
                raise ValueError("metric not monotone in k")

    def to_json(self) -> dict:
        return {
            "hr": {str(k): v for k, v in self.hr.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "n_users": self.n_users,
            "config": self.config,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls({int(k): v for k, v in obj["hr"].items()},
                   {int(k): v for k, v in obj["ndcg"].items()},
                   obj["n_users"], obj.get("config", {}), obj.get("seed"))


# -- metrics -----------------------------------------------------------------

def rank_of_target(scores, target: int, history: Sequence[int] = (),
                   mask_history: bool = False) -> int:
    """1-based rank of ``target``; ties count against the target, padding never ranks."""
    s = torch.as_tensor(scores, dtype=torch.float64).clone()
    if target == 0:
        raise ValueError("target cannot be padding")
    s[0] = -math.inf
    if mask_history:
        for i in history:
            if i != target and i != 0:
                s[i] = -math.inf
    t = s[target]
    ahead = (s >= t).sum().item() - 1  # minus the target itself
    return int(1 + ahead)


def ranks_of_targets(scores: torch.Tensor, targets: torch.Tensor,
                     history: torch.Tensor | None = None) -> torch.Tensor:
    """Batched :func:`rank_of_target`; ``history`` (B, L) is masked when given."""
    s = scores.clone()
    s[:, 0] = -math.inf
    if history is not None:
        keep = s.gather(1, targets[:, None])
        s.scatter_(1, history, -math.inf)
        s.scatter_(1, targets[:, None], keep)
        s[:, 0] = -math.inf
    t = s.gather(1, targets[:, None])
    # the target counts itself once, which supplies the leading 1
    return (s >= t).sum(1)


def hr_at_k(rank: int, k: int) -> int:
    return int(rank <= k)


def ndcg_at_k(rank: int, k: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def metrics_from_ranks(ranks: Sequence[int], ks: Sequence[int] = KS
                       ) -> tuple[dict[int, float], dict[int, float]]:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no ranks")
    hr = {k: float(np.mean(r <= k)) for k in ks}
    ndcg = {k: float(np.mean(np.where(r <= k, 1.0 / np.log2(r + 1), 0.0))) for k in ks}
    return hr, ndcg


# -- model construction & checkpoints --------------------------------------------

def build_model(config: TrainConfig, n_items: int):
    if config.objective == "base":
        model = SequentialRecommender(n_items, config.d, config.n_max, config.encoder,
                                      config.n_layers, config.n_heads)
    else:
        model = InvariantRecommender(n_items, config.d, config.n_max, config.encoder,
                                     config.confounder_encoder, config.n_layers,
                                     config.n_heads, config.stochastic, config.fusion)
    return model.init(RngStream(config.seed).spawn("init"))


def save_model(path, model, config: TrainConfig, n_items: int, extra: dict | None = None):
    save_checkpoint(path, model, {"config": config.to_dict(), "n_items": n_items,
                                  "seed": config.seed, **(extra or {})})


def load_model(path):
    header, state = read_checkpoint(path)
    config = TrainConfig.from_dict(header["config"])
    model = build_model(config, header["n_items"])
    model.load_state_dict(state)
    return model, config, header


# -- training ------------------------------------------------------------------

def _examples_tensors(examples: Sequence[SequenceExample]):
    items = torch.tensor([e.items for e in examples], dtype=torch.long)
    targets = torch.tensor([e.target for e in examples], dtype=torch.long)
    users = torch.tensor([e.user for e in examples], dtype=torch.long)
    return items, targets, users


class NegativeSampler:
    """Uniform negatives among items the user never interacted with."""

    def __init__(self, splits: DatasetSplits):
        self.n_items = splits.n_items
        stride = self.n_items + 1
        codes = sorted({u * stride + i for u, seq in splits.sequences.items() for i in seq})
        self.codes = torch.tensor(codes, dtype=torch.long)
        self.stride = stride
        self.max_seen = max((len(set(s)) for s in splits.sequences.values()), default=0)
        if self.max_seen >= self.n_items:
            raise ValueError("some user has interacted with every item; no negatives left")

    def sample(self, users: torch.Tensor, k: int, rng: RngStream) -> torch.Tensor:
        neg = rng.randint(1, self.n_items + 1, (users.shape[0], k))
        while True:
            bad = torch.isin(users[:, None] * self.stride + neg, self.codes)
            n_bad = int(bad.sum())
            if not n_bad:
                return neg
            neg[bad] = rng.randint(1, self.n_items + 1, (n_bad,))


@dataclass
class TrainResult:
    model: torch.nn.Module
    config: TrainConfig
    best_epoch: int
    epochs_run: int
    best_valid_ndcg10: float
    history: list[dict]
    step_log: list[dict]
    last_state: dict = field(repr=False, default_factory=dict)


def train(splits: DatasetSplits, config: TrainConfig,
          on_step: Callable[[dict], None] | None = None,
          on_epoch: Callable[[int, torch.nn.Module, dict], None] | None = None) -> TrainResult:
    """Seeded mini-batch Adam with early stopping on validation NDCG@10.

    Stops once ``patience`` epochs have passed without improvement and returns
    the model restored to its best validation epoch.
    """
    if not splits.train:
        raise ValueError("empty training split")
    if config.n_max != splits.max_len:
        config = config.replace(n_max=splits.max_len)
    rng = RngStream(config.seed)
    batch_rng, noise_rng = rng.spawn("batches"), rng.spawn("noise")
    model = build_model(config, splits.n_items)
    params = list(model.parameters())
    item_index = next(i for i, (n, _) in enumerate(model.named_parameters())
                      if n == "tables.items")
    state = AdamState.for_params(params)
    sampler = NegativeSampler(splits)
    items, targets, users = _examples_tensors(splits.train)
    weights = config.weights
    disabled = frozenset(config.disabled_terms)

    best = (-1.0, 0, copy.deepcopy(model.state_dict()))
    history, step_log, step = [], [], 0
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        perm = batch_rng.permutation(items.shape[0])
        for start in range(0, perm.numel(), config.batch_size):
            idx = perm[start:start + config.batch_size]
            neg = sampler.sample(users[idx], config.n_negatives, batch_rng)
            ctx = trim_padding(items[idx])
            if config.objective == "base":
                total = model.loss(ctx, targets[idx], neg)
                record = {"step": step, "total": float(total.detach())}
            else:
                parts = model.loss(ctx, targets[idx], neg, weights, noise_rng,
                                   disabled, config.detach_confounder,
                                   config.block_confounder_grad)
                total = parts.total
                record = parts.record(step)
            try:
                grads = numerics.backward(total, params)
            except NonFiniteError as exc:
                raise DivergenceError(step, str(exc)) from exc
            grads[item_index][0].zero_()
            numerics.adam_step(params, grads, state, config.lr, config.weight_decay)
            step_log.append(record)
            if on_step is not None:
                on_step(record)
            step += 1

        report = evaluate(model, splits, "validation")
        ndcg10 = report.ndcg[10]
        history.append({"epoch": epoch, "valid_ndcg10": ndcg10, "valid_hr10": report.hr[10],
                        "seconds": time.perf_counter() - t0})
        log.info("epoch %d valid NDCG@10 %.4f HR@10 %.4f", epoch, ndcg10, report.hr[10])
        if on_epoch is not None:
            on_epoch(epoch, model, history[-1])
        if ndcg10 > best[0]:
            best = (ndcg10, epoch, copy.deepcopy(model.state_dict()))
        elif epoch - best[1] > config.patience:
            break

    last_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best[2])
    return TrainResult(model, config, best[1], epoch, best[0], history, step_log, last_state)


# -- evaluation ----------------------------------------------------------------

@torch.no_grad()
def evaluate(model, splits: DatasetSplits, which: str = "test", ks: Sequence[int] = KS,
             mask_history: bool = False, batch_size: int = 1024,
             config: dict | None = None, seed: int | None = None) -> EvalReport:
    """Full-catalog ranking of each user's held-out item."""
    if which not in ("validation", "test"):
        raise ValueError("which must be 'validation' or 'test'")
    examples = getattr(splits, which)
    if not examples:
        raise ValueError(f"empty {which} split")
    if model.tables.n_items != splits.n_items:
        raise ValueError("catalog size does not match the model")
    was_training = model.training
    model.eval()
    items, targets, _ = _examples_tensors(examples)
    ranks = []
    for start in range(0, items.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        scores = model.inference_scores(trim_padding(items[sl]))
        ranks.append(ranks_of_targets(scores, targets[sl],
                                      items[sl] if mask_history else None))
    model.train(was_training)
    hr, ndcg = metrics_from_ranks(torch.cat(ranks).tolist(), ks)
    return EvalReport(hr, ndcg, len(examples), config or {}, seed)


def run(splits: DatasetSplits, config: TrainConfig) -> tuple[TrainResult, EvalReport]:
    result = train(splits, config)
    report = evaluate(result.model, splits, "test", mask_history=config.mask_history,
                      config=config.to_dict(), seed=config.seed)
    return result, report


@dataclass
class AblationRow:
    name: str
    disabled: tuple[str, ...]
    reports: list[EvalReport]

    def mean(self, metric: str, k: int) -> float:
        return float(np.mean([getattr(r, metric)[k] for r in self.reports]))


def ablate(splits: DatasetSplits, base_config: TrainConfig, seeds: Sequence[int] = (0,),
           variants=ABLATIONS) -> list[AblationRow]:
    """Full objective plus one run per dropped term, all on the same seeds."""
    rows = []
    for name, drop in variants:
        reports = []
        for seed in seeds:
            cfg = base_config.replace(objective="framework", seed=seed,
                                      disabled_terms=tuple(drop))
            reports.append(run(splits, cfg)[1])
        rows.append(AblationRow(name, tuple(drop), reports))
    return rows


# -- text tables ---------------------------------------------------------------

def format_report_table(rows: Sequence[tuple[str, EvalReport]],
                        baseline: str | None = None) -> str:
    cols = [f"HR@{k}" for k in KS] + [f"NDCG@{k}" for k in KS]
    lines = [f"{'Model':<16}" + "".join(f"{c:>10}" for c in cols)]
    by_name = dict(rows)
    for name, rep in rows:
        vals = [rep.hr[k] for k in KS] + [rep.ndcg[k] for k in KS]
        lines.append(f"{name:<16}" + "".join(f"{v:>10.4f}" for v in vals))
        if baseline is not None and name != baseline and baseline in by_name:
            b = by_name[baseline]
            base_vals = [b.hr[k] for k in KS] + [b.ndcg[k] for k in KS]
            imp = [100 * (v - bv) / bv if bv else float("nan") for v, bv in zip(vals, base_vals)]
            lines.append(f"{'improvement(%)':<16}" + "".join(f"{v:>10.2f}" for v in imp))
    return "\n".join(lines)


def format_ablation_table(tables: dict[str, list[AblationRow]]) -> str:
    """Rows raw / w/o (1) / w/o (2) / w/o (3); HR@20 and NDCG@20 per dataset."""
    names = list(tables)
    head1 = f"{'':<10}" + "".join(f"{n:^20}" for n in names)
    head2 = f"{'':<10}" + "".join(f"{'HR@20':>10}{'NDCG@20':>10}" for _ in names)
    lines = [head1, head2]
    for i, (label, _) in enumerate(ABLATIONS):
        cells = ""
        for n in names:
            row = tables[n][i]
            cells += f"{row.mean('hr', 20):>10.4f}{row.mean('ndcg', 20):>10.4f}"
        lines.append(f"{label:<10}" + cells)
    return "\n".join(lines)


def ablation_json(tables: dict[str, list[AblationRow]], config: TrainConfig,
                  seeds: Sequence[int]) -> dict:
    return {
        "config": config.to_dict(),
        "seeds": list(seeds),
        "datasets": {
            name: [{"variant": r.name, "disabled_terms": list(r.disabled),
                    "hr@20": r.mean("hr", 20), "ndcg@20": r.mean("ndcg", 20),
                    "reports": [rep.to_json() for rep in r.reports]} for r in rows]
            for name, rows in tables.items()
        },
    }


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)


# -- planted-confounder benchmark -------------------------------------------------

@dataclass
class DeconfoundingResult:
    seeds: list[int]
    ndcg20: dict[str, list[float]]  # variant -> per-seed test NDCG@20
    seconds: float

    def mean(self, variant: str) -> float:
        return float(np.mean(self.ndcg20[variant]))

    def relative_gain(self, over: str, variant: str = "full") -> float:
        base = self.mean(over)
        return (self.mean(variant) - base) / base if base else float("inf")

    def to_json(self) -> dict:
        return {"seeds": self.seeds, "ndcg20": self.ndcg20, "seconds": self.seconds,
                "means": {k: self.mean(k) for k in self.ndcg20}}


def deconfounding_experiment(seeds: Sequence[int], config: TrainConfig | None = None,
                             synth=None, log_fn: Callable[[str], None] | None = None
                             ) -> DeconfoundingResult:
    """Full objective vs base BPR vs "w/o (1)" on fresh synthetic data per seed.

    Seed ``s`` generates the dataset with seed ``s`` and trains every variant
    with seed ``s``.
    """
    from .synthetic import SynthConfig, generate

    config = config or TrainConfig()
    synth = synth or SynthConfig()
    variants = {
        "full": config.replace(objective="framework", disabled_terms=()),
        "base": config.replace(objective="base", disabled_terms=()),
        "w/o (1)": config.replace(objective="framework", disabled_terms=("a",)),
    }
    out = {name: [] for name in variants}
    t0 = time.perf_counter()
    for seed in seeds:
        splits, _ = generate(SynthConfig(**{**asdict(synth), "seed": seed}))
        for name, cfg in variants.items():
            _, rep = run(splits, cfg.replace(seed=seed))
            out[name].append(rep.ndcg[20])
            if log_fn is not None:
                log_fn(f"seed {seed} {name:<8} NDCG@20 {rep.ndcg[20]:.4f} "
                       f"({time.perf_counter() - t0:.0f}s)")
    return DeconfoundingResult(list(seeds), out, time.perf_counter() - t0)
