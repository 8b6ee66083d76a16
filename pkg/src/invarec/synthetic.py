"""Synthetic interaction logs with a planted spurious tag correlation.

Every item carries a latent attribute vector and one categorical tag. Tags are
assigned independently of the attributes, so they say nothing about what a
user actually likes. During the training period the next item is, with
probability ``spurious_strength``, drawn uniformly from the unseen items that
share a tag with a random history item; otherwise it is drawn from the user's
true preference (a softmax over attribute affinity). With ``flip_at_test`` the
final (test) item ignores tags entirely, so a model that leaned on the tag
shortcut pays for it at test time.

This is one concrete instantiation of a "spurious variable"; it is not meant
to mimic any real catalog's statistics.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Catalog, DatasetSplits, Interaction, build_splits, save_splits


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 2000
    n_items: int = 500
    d_true: int = 8
    n_tags: int = 16
    history_length: int = 10
    spurious_strength: float = 0.8
    flip_at_test: bool = True
    preference_sharpness: float = 3.0
    n_max: int = 20
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.spurious_strength <= 1.0:
            raise ValueError("spurious_strength must lie in [0, 1]")
        for name in ("n_users", "n_items", "d_true", "n_tags", "history_length", "n_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.history_length < 3:
            raise ValueError("history_length < 3 leaves no room for train/validation/test")
        if self.history_length > self.n_items:
            raise ValueError("history_length exceeds the catalog size")


@dataclass
class SynthGroundTruth:
    preferences: np.ndarray  # (n_users, d_true)
    attributes: np.ndarray  # (n_items + 1, d_true), row 0 is padding
    tags: np.ndarray  # (n_items + 1,), tags[0] == -1
    # per user, per position: True where the item came from the tag shortcut
    tag_driven: list[list[bool]]

    def to_json(self) -> dict:
        return {
            "preferences": self.preferences.tolist(),
            "attributes": self.attributes.tolist(),
            "tags": self.tags.tolist(),
            "tag_driven": self.tag_driven,
        }


def _item_id(i: int) -> str:
    return f"i{i:06d}"


def _user_id(u: int) -> str:
    return f"u{u:07d}"


def generate(config: SynthConfig) -> tuple[DatasetSplits, SynthGroundTruth]:
    rng = np.random.default_rng(config.seed)
    n, d = config.n_items, config.d_true
    attrs = np.vstack([np.zeros((1, d)), rng.standard_normal((n, d))])
    prefs = rng.standard_normal((config.n_users, d))
    # balanced tags, shuffled so they are independent of the attributes
    tags = np.concatenate([[-1], rng.permutation(np.arange(n) % config.n_tags)])
    items_by_tag = [np.flatnonzero(tags == g) for g in range(config.n_tags)]

    logits_all = config.preference_sharpness * (prefs @ attrs[1:].T) / np.sqrt(d)
    interactions: list[Interaction] = []
    tag_driven: list[list[bool]] = []
    L = config.history_length
    for u in range(config.n_users):
        logits = logits_all[u]
        seen = np.zeros(n + 1, dtype=bool)
        seen[0] = True
        seq: list[int] = []
        flags: list[bool] = []
        for step in range(L):
            test_step = step == L - 1
            use_tag = (
                step > 0
                and not (config.flip_at_test and test_step)
                and rng.random() < config.spurious_strength
            )
            item = None
            if use_tag:
                tag = tags[seq[rng.integers(len(seq))]]
                cand = items_by_tag[tag][~seen[items_by_tag[tag]]]
                if cand.size:
                    item = int(cand[rng.integers(cand.size)])
            if item is None:
                use_tag = False
                z = np.where(seen[1:], -np.inf, logits)
                p = np.exp(z - z.max())
                p /= p.sum()
                item = int(rng.choice(n, p=p)) + 1
            seen[item] = True
            seq.append(item)
            flags.append(bool(use_tag))
            interactions.append(Interaction(_user_id(u), _item_id(item), step))
        tag_driven.append(flags)

    catalog = Catalog(
        item_index={_item_id(i): i for i in range(1, n + 1)},
        user_index={_user_id(u): u for u in range(config.n_users)},
    )
    splits = build_splits(interactions, n_max=config.n_max, catalog=catalog)
    return splits, SynthGroundTruth(prefs, attrs, tags, tag_driven)


def tag_oracle_scores(history: list[int] | tuple[int, ...], tags: np.ndarray,
                      jitter: np.ndarray) -> np.ndarray:
    """Score every item by how many history items share its tag.

    ``jitter`` (values in [0, 1)) breaks the massive ties at random, so an
    uninformative tag signal ranks at chance.
    """
    real = [i for i in history if i != 0]
    counts = np.bincount(tags[real], minlength=int(tags.max()) + 1).astype(float)
    scores = np.where(tags >= 0, counts[np.maximum(tags, 0)], -np.inf) + jitter
    scores[0] = -np.inf
    return scores


def tag_oracle_hit_rate(examples, tags: np.ndarray, k: int = 10, seed: int = 0) -> float:
    """HR@k of the tag-frequency predictor over ``examples``."""
    rng = np.random.default_rng(seed)
    hits = 0
    for ex in examples:
        scores = tag_oracle_scores(ex.items, tags, rng.random(tags.shape[0]))
        rank = 1 + int(np.sum(scores > scores[ex.target]))
        hits += rank <= k
    return hits / len(examples)


def save(splits: DatasetSplits, truth: SynthGroundTruth, config: SynthConfig, out_dir) -> None:
    out = Path(out_dir)
    meta = {"generator": "synthetic", "config": asdict(config), "seed": config.seed}
    save_splits(splits, out, meta=meta)
    with open(out / "ground_truth.json", "w", encoding="utf-8") as fh:
        json.dump({"meta": meta, **truth.to_json()}, fh, sort_keys=True)
        fh.write("\n")
