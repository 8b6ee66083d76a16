"""Interaction-log ingestion, k-core filtering and leave-one-out splits."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

log = logging.getLogger(__name__)

PAD = 0
DEFAULT_MAX_LEN = 20

_USER_KEYS = ("user", "user_id", "reviewerID", "userId")
_ITEM_KEYS = ("item", "item_id", "asin", "parent_asin", "itemId")
_TIME_KEYS = ("timestamp", "time", "unixReviewTime", "ts")


class DataError(Exception):
    """Input data is unreadable, empty or violates a split invariant."""


class Interaction(NamedTuple):
    user_id: str
    item_id: str
    timestamp: int


@dataclass
class IngestResult:
    interactions: list[Interaction]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.interactions)

    def __iter__(self):
        return iter(self.interactions)


@dataclass
class Catalog:
    """Contiguous indices: items in ``[1, n_items]`` (0 is padding), users from 0."""

    item_index: dict[str, int]
    user_index: dict[str, int]

    @property
    def n_items(self) -> int:
        return len(self.item_index)

    @property
    def n_users(self) -> int:
        return len(self.user_index)

    @classmethod
    def from_interactions(cls, interactions: Iterable[Interaction]) -> "Catalog":
        users, items = set(), set()
        for it in interactions:
            users.add(it.user_id)
            items.add(it.item_id)
        # sorted ids so the mapping does not depend on input line order
        return cls(
            item_index={k: i + 1 for i, k in enumerate(sorted(items))},
            user_index={k: i for i, k in enumerate(sorted(users))},
        )


@dataclass(frozen=True)
class SequenceExample:
    user: int
    items: tuple[int, ...]
    true_length: int
    target: int

    def __post_init__(self):
        if self.target == PAD:
            raise ValueError("target cannot be the padding id")
        n_pad = len(self.items) - self.true_length
        if not 1 <= self.true_length <= len(self.items):
            raise ValueError("true_length out of range")
        if any(i != PAD for i in self.items[:n_pad]) or any(i == PAD for i in self.items[n_pad:]):
            raise ValueError("padding must be a left prefix")

    @classmethod
    def from_history(cls, user: int, history: list[int], target: int, max_len: int):
        ctx = history[-max_len:]
        return cls(user, (PAD,) * (max_len - len(ctx)) + tuple(ctx), len(ctx), target)

    def to_json(self) -> dict:
        return {"user": self.user, "items": list(self.items),
                "true_length": self.true_length, "target": self.target}

    @classmethod
    def from_json(cls, obj: dict) -> "SequenceExample":
        return cls(obj["user"], tuple(obj["items"]), obj["true_length"], obj["target"])


@dataclass
class DatasetSplits:
    train: list[SequenceExample]
    validation: list[SequenceExample]
    test: list[SequenceExample]
    catalog: Catalog
    # full chronological item sequence per user index (used for negative sampling)
    sequences: dict[int, list[int]] = field(default_factory=dict)
    max_len: int = DEFAULT_MAX_LEN

    @property
    def n_items(self) -> int:
        return self.catalog.n_items


def _first(record: dict, keys: tuple[str, ...]):
    for k in keys:
        if k in record:
            return record[k]
    raise KeyError(keys[0])


def _parse_fields(fields: list[str]) -> Interaction:
    if len(fields) == 3:
        user, item, ts = fields
    elif len(fields) == 4:
        user, item, _rating, ts = fields
    else:
        raise ValueError(f"expected 3 or 4 fields, got {len(fields)}")
    return _make(user, item, ts)


def _make(user, item, ts) -> Interaction:
    user, item = str(user).strip(), str(item).strip()
    if not user or not item:
        raise ValueError("empty id")
    if isinstance(ts, float) and not ts.is_integer():
        raise ValueError("non-integer timestamp")
    ts = int(ts) if not isinstance(ts, str) else int(ts.strip())
    if ts < 0:
        raise ValueError("negative timestamp")
    return Interaction(user, item, ts)


def _guess_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix in (".jsonl", ".json", ".ndjson"):
        return "json-lines"
    if suffix in (".tsv", ".tab"):
        return "tsv"
    return "csv"


def ingest(path: str | Path, fmt: str | None = None) -> IngestResult:
    """Read (user, item, timestamp[, rating]) records in file order.

    Delimited files take ``user,item,timestamp`` or ``user,item,rating,timestamp``
    columns; a header row naming the columns is recognised and skipped.
    Malformed records are skipped and counted.
    """
    path = Path(path)
    fmt = fmt or _guess_format(path)
    if fmt not in ("csv", "tsv", "json-lines"):
        raise ValueError(f"unknown format {fmt!r}")
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    out: list[Interaction] = []
    skipped = 0
    with fh:
        if fmt == "json-lines":
            for line in fh:
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    out.append(_make(_first(rec, _USER_KEYS), _first(rec, _ITEM_KEYS),
                                     _first(rec, _TIME_KEYS)))
                except (ValueError, KeyError, TypeError):
                    skipped += 1
        else:
            reader = csv.reader(fh, delimiter="," if fmt == "csv" else "\t")
            for lineno, row in enumerate(reader):
                if not row or all(not c.strip() for c in row):
                    continue
                if lineno == 0 and row[0].strip() in _USER_KEYS:
                    continue
                try:
                    out.append(_parse_fields(row))
                except ValueError:
                    skipped += 1
    if skipped:
        log.warning("%s: skipped %d malformed records", path, skipped)
    if not out:
        raise DataError(f"{path}: zero valid records")
    return IngestResult(out, skipped)


def dedupe(interactions: Iterable[Interaction]) -> list[Interaction]:
    """Keep the first occurrence of each (user, item) pair. Off by default."""
    seen = set()
    out = []
    for it in interactions:
        key = (it.user_id, it.item_id)
        if key not in seen:
            seen.add(key)
            out.append(it)
    return out


def five_core_filter(interactions: Iterable[Interaction], k: int = 5) -> list[Interaction]:
    """Drop users and items with fewer than ``k`` interactions, to a fixed point."""
    current = list(interactions)
    while True:
        users = Counter(it.user_id for it in current)
        items = Counter(it.item_id for it in current)
        kept = [it for it in current if users[it.user_id] >= k and items[it.item_id] >= k]
        if len(kept) == len(current):
            return kept
        current = kept


def build_splits(
    interactions: Iterable[Interaction],
    n_max: int = DEFAULT_MAX_LEN,
    catalog: Catalog | None = None,
) -> DatasetSplits:
    """Leave-one-out split per user.

    Test target is the last item, validation the penultimate, and every earlier
    position k >= 2 yields a training example with context ``c_1..c_{k-1}``.
    Contexts keep the ``n_max`` most recent items and are left-padded with 0.
    """
    interactions = list(interactions)
    if catalog is None:
        catalog = Catalog.from_interactions(interactions)
    by_user: dict[int, list[tuple[int, int, int]]] = defaultdict(list)
    for order, it in enumerate(interactions):
        by_user[catalog.user_index[it.user_id]].append(
            (it.timestamp, order, catalog.item_index[it.item_id])
        )

    train, valid, test = [], [], []
    sequences: dict[int, list[int]] = {}
    for user in sorted(by_user):
        seq = [item for _, _, item in sorted(by_user[user])]
        if len(seq) < 3:
            raise DataError(f"user index {user} has {len(seq)} interactions, need >= 3")
        sequences[user] = seq
        for k in range(1, len(seq) - 2):
            train.append(SequenceExample.from_history(user, seq[:k], seq[k], n_max))
        valid.append(SequenceExample.from_history(user, seq[:-2], seq[-2], n_max))
        test.append(SequenceExample.from_history(user, seq[:-1], seq[-1], n_max))
    return DatasetSplits(train, valid, test, catalog, sequences, n_max)


def stats(splits: DatasetSplits) -> dict:
    users = splits.catalog.n_users
    items = splits.catalog.n_items
    actions = sum(len(s) for s in splits.sequences.values())
    return {
        "users": users,
        "items": items,
        "actions": actions,
        "avg_length": actions / users if users else 0.0,
        "sparsity": 1.0 - actions / (users * items) if users and items else 0.0,
    }


def format_stats(st: dict, name: str = "dataset") -> str:
    """One row in the layout of the usual dataset-statistics table."""
    return (f"{name}\t{st['users']}\t{st['items']}\t{st['actions']}\t"
            f"{st['avg_length']:.1f}\t{100 * st['sparsity']:.2f}%")


# -- serialization ---------------------------------------------------------

def _write_jsonl(path: Path, meta: dict, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> tuple[dict, list[dict]]:
    meta, rows = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "meta" in obj and len(obj) == 1:
                meta = obj["meta"]
            else:
                rows.append(obj)
    return meta, rows


def save_splits(splits: DatasetSplits, out_dir: str | Path, meta: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {}, max_len=splits.max_len)
    for name in ("train", "validation", "test"):
        _write_jsonl(out / f"{name}.jsonl", meta, (e.to_json() for e in getattr(splits, name)))
    _write_jsonl(out / "sequences.jsonl", meta,
                 ({"user": u, "items": s} for u, s in sorted(splits.sequences.items())))
    with open(out / "catalog.json", "w", encoding="utf-8") as fh:
        json.dump({"meta": meta, "items": splits.catalog.item_index,
                   "users": splits.catalog.user_index}, fh, sort_keys=True)
        fh.write("\n")
    with open(out / "stats.json", "w", encoding="utf-8") as fh:
        json.dump({"meta": meta, **stats(splits)}, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_splits(path: str | Path) -> DatasetSplits:
    path = Path(path)
    if not (path / "catalog.json").exists():
        raise DataError(f"{path}: not a splits directory (catalog.json missing)")
    with open(path / "catalog.json", encoding="utf-8") as fh:
        cat = json.load(fh)
    catalog = Catalog(cat["items"], cat["users"])
    parts = {}
    max_len = DEFAULT_MAX_LEN
    for name in ("train", "validation", "test"):
        meta, rows = _read_jsonl(path / f"{name}.jsonl")
        max_len = meta.get("max_len", max_len)
        parts[name] = [SequenceExample.from_json(r) for r in rows]
    _, seq_rows = _read_jsonl(path / "sequences.jsonl")
    sequences = {r["user"]: r["items"] for r in seq_rows}
    return DatasetSplits(catalog=catalog, sequences=sequences, max_len=max_len, **parts)
