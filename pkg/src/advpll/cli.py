"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 verification failure (including a
violated ambiguity condition), 3 training divergence.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields

from . import harness, trainer
from .harness import ExperimentConfig

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_config_flags(p):
    p.add_argument("--config", help="key=value config file; flags override it")
    group = p.add_argument_group("experiment settings")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        group.add_argument(flag, dest=f"cfg_{f.name}", metavar=f.name.upper(), default=None)


def _config(args) -> ExperimentConfig:
    base = harness.load_config(args.config) if args.config else ExperimentConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return harness.config_from_text("\n".join(f"{k}={v}" for k, v in overrides.items()), base)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advpll", description="Partial-label learning under rival-label corruption.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write clean, test and corrupted CSVs")
    _add_config_flags(p)
    p = sub.add_parser("train", help="train on a generated run directory")
    _add_config_flags(p)
    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _add_config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="clean or partial-label CSV (default: the run's test.csv)")
    p = sub.add_parser("verify", help="run the numerical verification suite")
    p.add_argument("--level", choices=("fast", "full"), default="fast")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for CSV tables and the summary")
    p = sub.add_parser("ablate", help="paired with-T / without-T runs")
    _add_config_flags(p)
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    return parser


def _run(args) -> int:
    if args.command == "verify":
        reports = harness.cmd_verify(args.level, args.seed, args.out)
        for rep in reports:
            for ln in rep.lines():
                print(f"[{rep.name}] {ln}")
        return EXIT_OK if all(r.passed for r in reports) else EXIT_VERIFY

    cfg = _config(args)
    if args.command == "generate":
        try:
            report = harness.cmd_generate(cfg)
        except harness.AmbiguityError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VERIFY
        for ln in report.lines():
            print(ln)
    elif args.command == "train":
        try:
            _, rows = harness.cmd_train(cfg)
        except trainer.TrainingDiverged as exc:
            last = exc.rows[-1].epoch if exc.rows else "none"
            print(f"error: {exc}; last finite epoch: {last}", file=sys.stderr)
            return EXIT_DIVERGED
        last = rows[-1]
        print(f"epochs={len(rows)} test_acc={last.test_acc!r} proto_acc={last.proto_acc!r}")
    elif args.command == "eval":
        for ln in harness.cmd_eval(cfg, args.checkpoint, args.data).lines():
            print(ln)
    elif args.command == "ablate":
        try:
            seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
        except ValueError:
            raise UsageError(f"bad --seeds {args.seeds!r}") from None
        try:
            result = harness.cmd_ablate(cfg, seeds)
        except harness.AmbiguityError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VERIFY
        except trainer.TrainingDiverged as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        for ln in result.lines():
            print(ln)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return _run(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
