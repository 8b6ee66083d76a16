"""Learning-rate x weight-decay grid, selected on validation NDCG@10.

Each grid point runs in its own process.

    python3 scripts/grid_search.py --splits runs/splits/synth --workers 4
"""

import argparse
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import torch

from invarec.data import load_splits
from invarec.harness import LR_GRID, WEIGHT_DECAY_GRID, TrainConfig, evaluate, train


def _one(job):
    path, cfg_dict = job
    torch.set_num_threads(1)
    cfg = TrainConfig.from_dict(cfg_dict)
    splits = load_splits(path)
    res = train(splits, cfg)
    test = evaluate(res.model, splits, "test")
    return {"lr": cfg.lr, "weight_decay": cfg.weight_decay,
            "valid_ndcg10": res.best_valid_ndcg10, "best_epoch": res.best_epoch,
            "test": test.to_json()}


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--splits", type=Path, required=True)
    p.add_argument("--objective", default="framework", choices=("framework", "base"))
    p.add_argument("--encoder", default=TrainConfig.encoder)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path)
    args = p.parse_args()

    base = TrainConfig(objective=args.objective, encoder=args.encoder, seed=args.seed)
    jobs = [(str(args.splits), base.replace(lr=lr, weight_decay=wd).to_dict())
            for lr, wd in itertools.product(LR_GRID, WEIGHT_DECAY_GRID)]
    with ProcessPoolExecutor(args.workers) as pool:
        rows = list(pool.map(_one, jobs))
    rows.sort(key=lambda r: -r["valid_ndcg10"])
    for r in rows:
        print(f"lr {r['lr']:<7g} wd {r['weight_decay']:<7g} valid NDCG@10 {r['valid_ndcg10']:.4f} "
              f"test NDCG@20 {r['test']['ndcg']['20']:.4f}")
    best = rows[0]
    print(f"selected lr={best['lr']} weight_decay={best['weight_decay']}")
    if args.out:
        args.out.write_text(json.dumps({"config": base.to_dict(), "grid": rows}, indent=2) + "\n")


if __name__ == "__main__":
    main()
