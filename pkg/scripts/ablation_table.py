"""Ablation rows raw / w/o (1) / w/o (2) / w/o (3) on one or more splits directories.

    python3 scripts/ablation_table.py --splits runs/splits/synth --seeds 0 1 2
"""

import argparse
import json
from pathlib import Path

from invarec.data import load_splits
from invarec.harness import TrainConfig, ablate, ablation_json, format_ablation_table


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--splits", type=Path, nargs="+", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--encoder", default=TrainConfig.encoder)
    p.add_argument("--max-epochs", type=int, default=TrainConfig.max_epochs)
    p.add_argument("--out", type=Path)
    args = p.parse_args()

    cfg = TrainConfig(encoder=args.encoder, max_epochs=args.max_epochs)
    tables = {path.name: ablate(load_splits(path), cfg, args.seeds) for path in args.splits}
    print(format_ablation_table(tables))
    if args.out:
        args.out.write_text(json.dumps(ablation_json(tables, cfg, args.seeds), indent=2) + "\n")


if __name__ == "__main__":
    main()
