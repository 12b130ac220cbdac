"""Command line: ``ordrisk {generate,train,eval,heatmap,gradcheck}``.

Exit codes: 0 success, 1 validation/config error, 2 numerical-check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .config import ABLATION_FLAGS, ExperimentConfig, dump_config, load_config
from .errors import ConfigError, ValidationError
from .serialization import FormatError
from .tensor import DimensionError, DomainError, NumericalError

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

log = logging.getLogger("ordrisk")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    flags = {f: True for f in ABLATION_FLAGS if getattr(args, f, False)}
    if flags:
        cfg = cfg.with_ablation(**flags)
    return cfg


def cmd_generate(args) -> int:
    from .synthgen import generate_cohort, write_dataset

    cfg = _config(args)
    seed = cfg.train.seed if args.seed is None else args.seed
    if args.patients is not None:
        cfg = replace(cfg, data=replace(cfg.data, n_patients=args.patients))
        cfg.validate()
    out = write_dataset(generate_cohort(cfg.data, seed), args.out)
    dump_config(cfg, Path(out) / "config.yaml")
    print(f"wrote {cfg.data.n_patients} pairs to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import train

    cfg = _config(args)
    if args.max_epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, max_epochs=args.max_epochs))
        cfg.validate()
    res = train(cfg, args.data, args.out)
    print(f"best epoch {res.best_epoch} val_c_harrell {res.best_val:.4f}; checkpoint {res.checkpoint_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .training import evaluate

    report = evaluate(args.checkpoint, args.data, args.split, args.out, args.iters,
                      0 if args.seed is None else args.seed)
    for name, v in report.values.items():
        print(f"{name:<10} " + ("undefined" if v is None else f"{v.point:.4f} [{v.ci_lo:.4f}, {v.ci_hi:.4f}]"))
    return EXIT_OK


def cmd_heatmap(args) -> int:
    from .heatmaps import export_heatmaps
    from .synthgen import load_dataset
    from .training import load_checkpoint

    model, _, _ = load_checkpoint(args.checkpoint)
    pairs = load_dataset(args.data, args.split)
    chosen = [p for p in pairs if args.patient is None or p.patient_id == args.patient]
    if not chosen:
        raise ValidationError(f"patient {args.patient} not in split {args.split!r}")
    for pair in chosen[: args.limit]:
        target = Path(args.out) / f"patient_{pair.patient_id:05d}"
        export_heatmaps(model, pair, target)
        print(f"wrote {target}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    report = run_suite(args.scope, args.trials)
    for line in report.lines():
        print(line)
    if args.json:
        Path(args.json).write_text(json.dumps(
            [{"name": r.name, "trials": r.trials, "max_error": r.max_error, "passed": r.passed}
             for r in report.results], indent=2) + "\n")
    return EXIT_OK if report.passed else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ordrisk", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="YAML experiment config (defaults built in)")
        sp.add_argument("--seed", type=int)
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")

    g = sub.add_parser("generate", help="write a synthetic prior/current cohort")
    common(g, data=False)
    g.add_argument("--out", required=True)
    g.add_argument("--patients", type=int)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="fit a model and keep the best-validation checkpoint")
    common(t)
    t.add_argument("--out", required=True)
    t.add_argument("--max-epochs", type=int)
    for flag in ABLATION_FLAGS:
        t.add_argument(f"--{flag.replace('_', '-')}", dest=flag, action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="metric report with bootstrap CIs")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out")
    e.add_argument("--iters", type=int)
    e.set_defaults(fn=cmd_eval)

    h = sub.add_parser("heatmap", help="export attention and deformation maps as PGM images")
    common(h)
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--split", default="test")
    h.add_argument("--patient", type=int)
    h.add_argument("--limit", type=int, default=1)
    h.add_argument("--out", required=True)
    h.set_defaults(fn=cmd_heatmap)

    c = sub.add_parser("gradcheck", help="finite-difference check of ops, losses and the model")
    c.add_argument("--scope", choices=["ops", "losses", "model", "all"], default="all")
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--json", help="also write results as JSON")
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ValidationError, DimensionError, DomainError, FormatError, FileNotFoundError,
            KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
