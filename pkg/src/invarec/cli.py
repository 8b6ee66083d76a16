"""Command-line entry point: prepare, synth, train, eval, ablate, check.

Every command takes ``--seed`` and an optional ``--config`` file of
``key = value`` lines; explicit flags override the file. Outputs land under
``--out`` as ``splits/``, ``checkpoints/`` and ``reports/`` with one run id
per invocation, and every file carries the resolved configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import MISSING, asdict, fields
from pathlib import Path

from . import data as data_mod
from . import harness, infotheory, objective, synthetic
from .model import ENCODERS

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4, 5

log = logging.getLogger("invarec")


class ConfigError(ValueError):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _terms(text) -> tuple[str, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(t for t in str(text).replace(" ", "").split(",") if t)


def _optional_str(text):
    return None if text in (None, "", "none", "None") else str(text)


_TRAIN_HELP = {
    "objective": "'framework' (four-term loss) or 'base' (plain BPR)",
    "encoder": f"sequence encoder, one of {', '.join(ENCODERS)}",
    "confounder_encoder": "encoder for the confounder branch; None reuses --encoder",
    "d": "embedding dimension",
    "batch_size": "training mini-batch size",
    "n_max": "maximum history length",
    "alpha": "loss weight alpha",
    "beta": "loss weight beta on ||mu||^2",
    "gamma": "loss weight gamma",
    "n_layers": "attention blocks per encoder",
    "n_heads": "attention heads per block",
    "max_epochs": "upper bound on training epochs",
    "eval_batch_size": "users scored per evaluation batch",
    "lr": f"learning rate; grid {harness.LR_GRID}",
    "weight_decay": f"L2 weight decay; grid {harness.WEIGHT_DECAY_GRID}",
    "disabled_terms": "comma-separated loss terms to drop, subset of a,b,c,d",
    "patience": "epochs without validation NDCG@10 gain before stopping",
    "n_negatives": "sampled negatives per positive",
    "stochastic": "sample t = mu + eps*sigma during training",
    "fusion": "how t and s combine in H(y|t,s): sum or concat",
    "detach_confounder": "skip the confounder branch entirely",
    "block_confounder_grad": "stop term (b) gradients from reaching the confounder encoder",
    "mask_history": "drop history items from the ranked catalog at test time",
}


def _add_dataclass_flags(parser, cls, skip=("seed",), helps=None):
    helps = helps or {}
    for f in fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not MISSING else None
        flag = "--" + f.name.replace("_", "-")
        kw = {"dest": f.name, "default": default, "help": helps.get(f.name, f.name.replace("_", " "))}
        if isinstance(default, bool):
            kw.update(type=_bool, nargs="?", const=True, metavar="BOOL")
        elif f.name == "disabled_terms":
            kw.update(type=_terms, default=(), metavar="TERMS")
        elif f.name == "confounder_encoder":
            kw.update(type=_optional_str, metavar="ENCODER")
        elif isinstance(default, float):
            kw["type"] = float
        elif isinstance(default, int):
            kw["type"] = int
        else:
            kw["type"] = str
        parser.add_argument(flag, **kw)


def _common(parser):
    parser.add_argument("--seed", type=int, required=True, help="seed for all randomness")
    parser.add_argument("--config", type=Path, help="plain-text key = value file; flags win")
    parser.add_argument("--out", type=Path, default=Path("runs"), help="output root")
    parser.add_argument("--run-id", help="run directory name; timestamped when omitted")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="invarec", formatter_class=fmt,
                                description="Deconfounded sequential recommendation toolkit.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    sp = sub.add_parser("prepare", formatter_class=fmt,
                        help="ingest a raw log, 5-core filter, build leave-one-out splits")
    _common(sp)
    sp.add_argument("--input", type=Path, required=True, help="csv, tsv or json-lines log")
    sp.add_argument("--format", choices=("csv", "tsv", "jsonl"), help="override detection")
    sp.add_argument("--core", type=int, default=5, help="minimum interactions per user and item")
    sp.add_argument("--n-max", dest="n_max", type=int, default=data_mod.DEFAULT_MAX_LEN,
                    help="maximum history length")
    sp.add_argument("--dedupe", type=_bool, nargs="?", const=True, default=False,
                    metavar="BOOL", help="drop repeated (user, item) pairs")
    sp.add_argument("--name", default="dataset", help="label for the stats row")

    sp = sub.add_parser("synth", formatter_class=fmt,
                        help="generate the planted-confounder benchmark")
    _common(sp)
    _add_dataclass_flags(sp, synthetic.SynthConfig, helps={
        "spurious_strength": "probability rho that a training-period item follows the tag",
        "flip_at_test": "draw the test item from true preference only",
    })

    for name, text in (("train", "train a model and report test metrics"),
                       ("ablate", "full objective plus one run per dropped term")):
        sp = sub.add_parser(name, formatter_class=fmt, help=text)
        _common(sp)
        sp.add_argument("--splits", type=Path, required=True, action="append",
                        help="splits directory (repeat for several datasets with ablate)")
        sp.add_argument("--allow-off-grid", type=_bool, nargs="?", const=True, default=False,
                        metavar="BOOL", help="permit lr / weight decay outside the grids")
        _add_dataclass_flags(sp, harness.TrainConfig, helps=_TRAIN_HELP)
        if name == "ablate":
            sp.add_argument("--n-seeds", dest="n_seeds", type=int, default=1,
                            help="seeds used are seed, seed+1, ...")

    sp = sub.add_parser("eval", formatter_class=fmt, help="evaluate a saved checkpoint")
    _common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--splits", type=Path, required=True)
    sp.add_argument("--which", choices=("validation", "test"), default="test")
    sp.add_argument("--mask-history", dest="mask_history", type=_bool, nargs="?", const=True,
                    default=False, metavar="BOOL", help="drop history items from the ranking")

    sp = sub.add_parser("check", formatter_class=fmt,
                        help="identity suite, KL closed form and gradient checks")
    _common(sp)
    sp.add_argument("--encoders", type=_terms, default=ENCODERS, metavar="LIST",
                    help="comma-separated encoders for the gradient check")
    sp.add_argument("--mc-samples", dest="mc_samples", type=int, default=1_000_000,
                    help="Monte Carlo draws per KL check")
    return p


# -- config file ---------------------------------------------------------------

def read_config_file(path: Path) -> dict[str, str]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _explicit_dests(parser, argv) -> set[str]:
    """Destinations the user actually set on the command line."""
    seen = set()
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    cmd_parser = sub.choices[argv[0]]
    by_flag = {opt: a.dest for a in cmd_parser._actions for opt in a.option_strings}
    for tok in argv[1:]:
        flag = tok.split("=", 1)[0]
        if flag in by_flag:
            seen.add(by_flag[flag])
    return seen


def apply_config(parser, argv, args) -> argparse.Namespace:
    if args.config is None:
        return args
    values = read_config_file(args.config)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    actions = {a.dest: a for a in sub.choices[args.command]._actions}
    explicit = _explicit_dests(parser, argv)
    for key, value in values.items():
        if key not in actions or key in ("config", "help"):
            raise ConfigError(f"unknown config key {key!r} for '{args.command}'")
        if key in explicit:
            continue
        action = actions[key]
        conv = action.type or (lambda x: x)
        try:
            setattr(args, key, conv(value))
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc
        if action.choices is not None and getattr(args, key) not in action.choices:
            raise ConfigError(f"config key {key!r}: {value!r} not in {list(action.choices)}")
    return args


# -- helpers ---------------------------------------------------------------------

_NOT_ECHOED = ("command", "config", "out", "run_id", "verbose")


def _echo(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in _NOT_ECHOED:
            continue
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, list):
            v = [str(x) if isinstance(x, Path) else x for x in v]
        out[k] = v
    return out


def _run_dir(args, kind: str) -> Path:
    run_id = args.run_id or f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}-s{args.seed}"
    path = args.out / kind / run_id
    if args.run_id is None:
        n = 1
        while path.exists():
            path = args.out / kind / f"{run_id}.{n}"
            n += 1
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(harness.dumps(obj) + "\n", encoding="utf-8")


def _train_config(args) -> harness.TrainConfig:
    kw = {f.name: getattr(args, f.name) for f in fields(harness.TrainConfig) if f.name != "seed"}
    try:
        cfg = harness.TrainConfig(seed=args.seed, **kw)
        cfg.weights  # validates alpha, beta, gamma
        if cfg.encoder not in ENCODERS or (cfg.confounder_encoder not in (None, *ENCODERS)):
            raise ValueError(f"encoder must be one of {ENCODERS}")
        if cfg.fusion not in objective.FUSIONS:
            raise ValueError(f"fusion must be one of {objective.FUSIONS}")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not args.allow_off_grid:
        if cfg.lr not in harness.LR_GRID:
            raise ConfigError(f"lr {cfg.lr} is off the grid {harness.LR_GRID} "
                              "(pass --allow-off-grid to override)")
        if cfg.weight_decay not in harness.WEIGHT_DECAY_GRID:
            raise ConfigError(f"weight_decay {cfg.weight_decay} is off the grid "
                              f"{harness.WEIGHT_DECAY_GRID} (pass --allow-off-grid to override)")
    return cfg


# -- commands -------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    ingested = data_mod.ingest(args.input, args.format)
    rows = ingested.interactions
    if args.dedupe:
        rows = data_mod.dedupe(rows)
    core = data_mod.five_core_filter(rows, args.core)
    if not core:
        raise data_mod.DataError(f"nothing survives {args.core}-core filtering")
    splits = data_mod.build_splits(core, n_max=args.n_max)
    out = _run_dir(args, "splits")
    meta = {"command": "prepare", "config": _echo(args), "seed": args.seed,
            "skipped_rows": ingested.skipped}
    data_mod.save_splits(splits, out, meta=meta)
    st = data_mod.stats(splits)
    print(data_mod.format_stats(st, args.name))
    print(out)
    return EXIT_OK


def cmd_synth(args) -> int:
    kw = {f.name: getattr(args, f.name) for f in fields(synthetic.SynthConfig) if f.name != "seed"}
    try:
        cfg = synthetic.SynthConfig(seed=args.seed, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    splits, truth = synthetic.generate(cfg)
    out = _run_dir(args, "splits")
    synthetic.save(splits, truth, cfg, out)
    print(data_mod.format_stats(data_mod.stats(splits), "synthetic"))
    print(out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if len(args.splits) != 1:
        raise ConfigError("train takes exactly one --splits directory")
    splits = data_mod.load_splits(args.splits[0])
    result, report = harness.run(splits, cfg)
    ck_dir = _run_dir(args, "checkpoints")
    run_id = ck_dir.name
    harness.save_model(ck_dir / "model.npz", result.model, result.config, splits.n_items,
                       {"echo": _echo(args), "best_epoch": result.best_epoch})
    rep_dir = args.out / "reports" / run_id
    _write_json(rep_dir / "train.json", {
        "command": "train", "config": _echo(args), "seed": args.seed,
        "train_config": result.config.to_dict(), "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run, "best_valid_ndcg10": result.best_valid_ndcg10,
        "history": result.history, "test": report.to_json(),
        "checkpoint": str(ck_dir / "model.npz"),
    })
    with open(rep_dir / "steps.jsonl", "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": {"config": _echo(args), "seed": args.seed}}) + "\n")
        for rec in result.step_log:
            fh.write(json.dumps(rec) + "\n")
    print(harness.format_report_table([(cfg.objective, report)]))
    print(ck_dir / "model.npz")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model, cfg, header = harness.load_model(args.checkpoint)
    except (OSError, KeyError, ValueError) as exc:
        raise data_mod.DataError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    splits = data_mod.load_splits(args.splits)
    report = harness.evaluate(model, splits, args.which, mask_history=args.mask_history,
                              config={"echo": _echo(args), "train_config": cfg.to_dict()},
                              seed=args.seed)
    out = _run_dir(args, "reports")
    _write_json(out / "eval.json", {"command": "eval", "config": _echo(args), "seed": args.seed,
                                    "report": report.to_json()})
    print(harness.format_report_table([(args.which, report)]))
    print(out / "eval.json")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    if args.n_seeds < 1:
        raise ConfigError("--n-seeds must be >= 1")
    seeds = [args.seed + i for i in range(args.n_seeds)]
    tables = {}
    for path in args.splits:
        splits = data_mod.load_splits(path)
        tables[Path(path).name] = harness.ablate(splits, cfg, seeds)
    out = _run_dir(args, "reports")
    payload = harness.ablation_json(tables, cfg, seeds)
    payload.update(command="ablate", echo=_echo(args), seed=args.seed)
    _write_json(out / "ablation.json", payload)
    text = harness.format_ablation_table(tables)
    (out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    print(out / "ablation.json")
    return EXIT_OK


def cmd_check(args) -> int:
    from .numerics import RngStream

    results = {}
    ident = infotheory.random_identity_suite(seed=args.seed)
    results["identity"] = {**asdict(ident), "passed": ident.passed()}
    print(f"identity   rewrite {ident.max_rewrite_residual:.2e} "
          f"entropy-form {ident.max_entropy_form_residual:.2e} "
          f"bound violations {ident.bound_violations}/{ident.n_bound_cases} "
          f"{'PASS' if ident.passed() else 'FAIL'}")

    rng = RngStream(args.seed).spawn("kl")
    worst = 0.0
    for i in range(20):
        mu = rng.normal((8,))
        sigma = 0.3 + 1.2 * rng.uniform((8,))
        exact = objective.compression_term(objective.StochasticEmbedding(mu, sigma, None)).item()
        mc = objective.monte_carlo_kl(mu, sigma, args.mc_samples, rng.spawn(f"draw{i}"))
        worst = max(worst, abs(mc - exact) / exact)
    results["kl_closed_form"] = {"max_rel_error": worst, "passed": worst < 0.01}
    print(f"kl         max rel error {worst:.2e} {'PASS' if worst < 0.01 else 'FAIL'}")

    for enc in args.encoders:
        if enc not in ENCODERS:
            raise ConfigError(f"unknown encoder {enc!r}")
        chk = objective.toy_gradient_check(enc, seed=args.seed)
        results[f"gradient/{enc}"] = {"max_rel_error": chk.max_rel_error,
                                      "n_checked": chk.n_checked, "passed": chk.passed(1e-4)}
        print(f"gradient   {enc:<30} max rel error {chk.max_rel_error:.2e} "
              f"{'PASS' if chk.passed(1e-4) else 'FAIL'}")

    ok = all(r["passed"] for r in results.values())
    out = _run_dir(args, "reports")
    _write_json(out / "check.json", {"command": "check", "config": _echo(args),
                                     "seed": args.seed, "results": results, "passed": ok})
    return EXIT_OK if ok else 1


COMMANDS = {"prepare": cmd_prepare, "synth": cmd_synth, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate, "check": cmd_check}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args = apply_config(parser, argv, args)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data_mod.DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except harness.DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
