"""Command-line entry point.

    scalebio run --preset denoise --seed 1 --out out/denoise
    scalebio verify --out out/verify
    scalebio compare --out out/compare

Exit status: 0 when every verdict passes, 1 on a verdict failure (the failing
metrics are printed), 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import sys

from .config import PRESETS, ConfigError, load_config

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _u64(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scalebio", description="First-order bilevel data reweighting experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI-style config file")
    common.add_argument("--seed", type=_u64, help="master seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--log-every", type=_positive, metavar="N", help="trajectory logging period")
    common.add_argument("--wallclock", action="store_true", help="write measured seconds into CSVs")
    common.add_argument("--quiet", action="store_true", help="print only failures")

    run = sub.add_parser("run", parents=[common], help="run one preset experiment")
    run.add_argument("--preset", choices=PRESETS, metavar="NAME", help=f"one of: {', '.join(PRESETS)}")
    sub.add_parser("verify", parents=[common], help="invariant suite and gradient-check sweep")
    sub.add_parser("compare", parents=[common], help="ScaleBiO against second-order baselines")
    return parser


def _overrides(args, preset=None) -> dict:
    experiment = {}
    if preset is not None:
        experiment["preset"] = preset
    if args.seed is not None:
        experiment["seed"] = args.seed
    if args.out is not None:
        experiment["out"] = args.out
    if args.log_every is not None:
        experiment["log_every"] = args.log_every
    if args.wallclock:
        experiment["wallclock"] = True
    return {"experiment": experiment}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    preset = {"run": getattr(args, "preset", None), "verify": "quad-verify", "compare": "baseline-compare"}[args.command]
    try:
        cfg = load_config(args.config, overrides=_overrides(args, preset))
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "verify":
        from .verify import run_verify

        report = run_verify(cfg)
    else:
        from .presets import run_preset

        report = run_preset(cfg)

    if args.quiet:
        for verdict in report.failures:
            print(verdict.line())
    else:
        print(report.summary())
    if report.passed:
        return EXIT_OK
    names = ", ".join(v.name for v in report.failures)
    print(f"FAILED: {names}", file=sys.stderr)
    return EXIT_FAIL


if __name__ == "__main__":
    raise SystemExit(main())
