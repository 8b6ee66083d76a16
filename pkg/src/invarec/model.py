"""Base sequential recommender: embeddings, sequence encoders, scoring, BPR."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import numerics
from .numerics import RngStream

ENCODERS = ("recurrent-gated", "self-attention-causal", "self-attention-bidirectional")
CHECKPOINT_VERSION = 1
_MASK_FILL = -1e9


class EmbeddingTable(nn.Module):
    """Item matrix (row 0 = padding, kept at zero) and position table."""

    def __init__(self, n_items: int, d: int, n_max: int):
        super().__init__()
        self.n_items, self.d, self.n_max = n_items, d, n_max
        self.items = nn.Parameter(torch.zeros(n_items + 1, d, dtype=numerics.dtype()))
        self.positions = nn.Parameter(torch.zeros(n_max, d, dtype=numerics.dtype()))

    def forward(self, items: torch.Tensor) -> torch.Tensor:
        """``(B, L)`` item ids -> ``(B, L, d)``; rows of padding are all zero.

        Positions are right-aligned: the most recent item always gets the last
        position vector, whatever the padded length ``L <= n_max``.
        """
        L = items.shape[-1]
        if L > self.n_max:
            raise ValueError(f"sequence length {L} exceeds n_max={self.n_max}")
        if bool((items < 0).any()) or bool((items > self.n_items).any()):
            raise IndexError("item id out of range")
        mask = (items != 0).unsqueeze(-1).to(self.items.dtype)
        return (self.items[items] + self.positions[self.n_max - L:]) * mask


class GRUEncoder(nn.Module):
    """Single-layer gated recurrent encoder; padding steps leave the state untouched."""

    def __init__(self, d: int):
        super().__init__()
        self.cell = nn.GRUCell(d, d, dtype=numerics.dtype())

    def forward(self, x: torch.Tensor, mask: torch.Tensor, last_only: bool = False
                ) -> torch.Tensor:
        h = x.new_zeros(x.shape[0], x.shape[2])
        out = []
        for k in range(x.shape[1]):
            step = self.cell(x[:, k], h)
            h = torch.where(mask[:, k : k + 1], step, h)
            out.append(h)
        return h[:, None] if last_only else torch.stack(out, dim=1)


class _Block(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
        dt = numerics.dtype()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d, dtype=dt)
        self.qkv = nn.Linear(d, 3 * d, dtype=dt)
        self.proj = nn.Linear(d, d, dtype=dt)
        self.ln2 = nn.LayerNorm(d, dtype=dt)
        self.ff1 = nn.Linear(d, d, dtype=dt)
        self.ff2 = nn.Linear(d, d, dtype=dt)

    def forward(self, x: torch.Tensor, bias: torch.Tensor, last_only: bool = False
                ) -> torch.Tensor:
        B, L, d = x.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        if last_only:
            q, bias, x = q[:, -1:], bias[..., -1:, :], x[:, -1:]
        q = q.reshape(B, -1, self.n_heads, hd).transpose(1, 2)
        k, v = (t.view(B, L, self.n_heads, hd).transpose(1, 2) for t in (k, v))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd) + bias, dim=-1)
        x = x + self.proj((att @ v).transpose(1, 2).reshape(B, -1, d))
        return x + self.ff2(nn.functional.gelu(self.ff1(self.ln2(x))))


class AttentionEncoder(nn.Module):
    """Pre-norm transformer encoder; padded keys are masked out."""

    def __init__(self, d: int, n_layers: int = 2, n_heads: int = 2, causal: bool = True):
        super().__init__()
        self.causal = causal
        self.blocks = nn.ModuleList(_Block(d, n_heads) for _ in range(n_layers))
        self.ln = nn.LayerNorm(d, dtype=numerics.dtype())

    def forward(self, x: torch.Tensor, mask: torch.Tensor, last_only: bool = False
                ) -> torch.Tensor:
        """``(B, L, d)`` -> ``(B, L, d)``, or ``(B, 1, d)`` holding only the final
        row when ``last_only`` (the last block then skips the other queries)."""
        L = x.shape[1]
        allowed = mask[:, None, None, :]
        if self.causal:
            allowed = allowed & torch.ones(L, L, dtype=torch.bool).tril()
        bias = torch.zeros(allowed.shape, dtype=x.dtype).masked_fill(~allowed, _MASK_FILL)
        for i, block in enumerate(self.blocks):
            x = block(x, bias, last_only and i == len(self.blocks) - 1)
        return self.ln(x)


def build_encoder(variant: str, d: int, n_layers: int = 2, n_heads: int = 2) -> nn.Module:
    if variant == "recurrent-gated":
        return GRUEncoder(d)
    if variant == "self-attention-causal":
        return AttentionEncoder(d, n_layers, n_heads, causal=True)
    if variant == "self-attention-bidirectional":
        return AttentionEncoder(d, n_layers, n_heads, causal=False)
    raise ValueError(f"unknown encoder variant {variant!r}; choose from {ENCODERS}")


def embed_sequence(items: torch.Tensor, tables: EmbeddingTable) -> torch.Tensor:
    return tables(torch.as_tensor(items))


def encode(e_u: torch.Tensor, encoder: nn.Module, mask: torch.Tensor) -> torch.Tensor:
    """Final row of the encoder output, ``(B, d)`` (or ``(d,)`` for one sequence)."""
    single = e_u.dim() == 2
    if single:
        e_u, mask = e_u.unsqueeze(0), mask.unsqueeze(0)
    if e_u.shape[:2] != mask.shape:
        raise ValueError("embedding and mask shapes disagree")
    h = encoder(e_u, mask, last_only=True)[:, -1]
    return h[0] if single else h


def trim_padding(items: torch.Tensor) -> torch.Tensor:
    """Drop leading columns that are padding in every row of the batch."""
    real = (items != 0).any(0)
    if not bool(real.any()):
        return items[:, -1:]
    first = int(real.int().argmax())
    return items[:, first:]


def score_items(h: torch.Tensor, tables: EmbeddingTable) -> torch.Tensor:
    """Inner product with every item row; the padding column is ``-inf``."""
    scores = h @ tables.items.T
    pad = torch.zeros_like(scores)
    pad[..., 0] = -math.inf
    return scores + pad


def bpr_loss(score_pos: torch.Tensor, score_neg: torch.Tensor) -> torch.Tensor:
    """Elementwise -ln sigmoid(pos - neg), as softplus(neg - pos)."""
    return numerics.softplus(score_neg - score_pos)


def pair_scores(h: torch.Tensor, tables: EmbeddingTable, pos: torch.Tensor,
                neg: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Scores of ``pos`` (B,) and ``neg`` (B, k) for representations ``h`` (B, d)."""
    s_pos = (h * tables.items[pos]).sum(-1)
    s_neg = (h.unsqueeze(1) * tables.items[neg]).sum(-1)
    return s_pos, s_neg


def mean_bpr(h, tables, pos, neg) -> torch.Tensor:
    s_pos, s_neg = pair_scores(h, tables, pos, neg)
    return bpr_loss(s_pos.unsqueeze(1), s_neg).mean()


class SequentialRecommender(nn.Module):
    """Embedding table plus one sequence encoder, trained with plain BPR."""

    def __init__(self, n_items: int, d: int = 64, n_max: int = 20,
                 encoder: str = "self-attention-bidirectional", n_layers: int = 2,
                 n_heads: int = 2):
        super().__init__()
        self.tables = EmbeddingTable(n_items, d, n_max)
        self.f_theta = build_encoder(encoder, d, n_layers, n_heads)

    def init(self, rng: RngStream) -> "SequentialRecommender":
        init_parameters(self.tables, rng.spawn("tables"))
        init_parameters(self.f_theta, rng.spawn("f_theta"))
        return self

    def represent(self, items: torch.Tensor) -> torch.Tensor:
        return encode(self.tables(items), self.f_theta, items != 0)

    def inference_scores(self, items: torch.Tensor) -> torch.Tensor:
        return score_items(self.represent(items), self.tables)

    def loss(self, items, pos, neg) -> torch.Tensor:
        return mean_bpr(self.represent(items), self.tables, pos, neg)


# -- initialisation --------------------------------------------------------

def init_parameters(module: nn.Module, rng: RngStream, embed_std: float = 0.1) -> None:
    """Deterministic initialisation from ``rng`` in parameter-registration order."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if isinstance(module, EmbeddingTable) or leaf in ("items", "positions"):
                p.copy_(rng.normal(p.shape) * embed_std)
                if leaf == "items":
                    p[0].zero_()
            elif ".ln" in f".{name}" or name.startswith("ln"):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif "cell" in name:
                bound = 1.0 / math.sqrt(p.shape[-1] if p.dim() > 1 else p.shape[0] // 3)
                p.copy_((rng.uniform(p.shape) * 2 - 1) * bound)
            elif leaf == "bias":
                p.zero_()
            else:
                fan_out, fan_in = p.shape
                p.copy_(rng.normal(p.shape) * math.sqrt(2.0 / (fan_in + fan_out)))


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path: str | Path, module: nn.Module, meta: dict) -> None:
    """npz container: one float array per named parameter plus a json header."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    header = {"format_version": CHECKPOINT_VERSION, **meta,
              "shapes": {k: list(v.shape) for k, v in module.state_dict().items()}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        state = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files
                 if k.startswith("param/")}
    return header, state
