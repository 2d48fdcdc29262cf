"""Command line entry point.

    buddysim profile  --config exp.cfg --out out/profile
    buddysim build    --config exp.cfg --set builder.alpha=0.95 --out out/build
    buddysim simulate --config exp.cfg --set method=buddy --seed 3 --out out/run
    buddysim report   out/run*/metrics.csv --out out/report

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 invariant
violation.
"""

from __future__ import annotations

import argparse
import sys

from . import harness
from .config import load_config
from .errors import (
    BuddySimError,
    CalibrationError,
    ConfigurationError,
    DegeneratePivotError,
    FormatError,
    InputError,
    InternalError,
    InvariantViolation,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INVARIANT = 4

_CONFIG_ERRORS = (ConfigurationError, InputError, CalibrationError, DegeneratePivotError)
_INVARIANT_ERRORS = (InvariantViolation, InternalError)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", metavar="PATH", default=None, help="config file")
    sub.add_argument(
        "--set",
        metavar="KEY=VALUE",
        action="append",
        default=[],
        dest="sets",
        help="override one config key (repeatable)",
    )
    sub.add_argument("--seed", type=int, default=None, metavar="N", help="run seed shorthand")
    sub.add_argument("--out", metavar="DIR", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="buddysim",
        description="Trace-driven simulator for co-activation-based expert substitution",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("profile", "collect co-activation statistics and entropy samples"),
        ("build", "build buddy tables from profiled statistics"),
        ("simulate", "replay a stream under a residency budget"),
    ):
        sp = subs.add_parser(name, help=doc)
        _add_common(sp)
    rp = subs.add_parser("report", help="collate run metrics into a comparison table")
    rp.add_argument("metrics", nargs="+", metavar="METRICS_CSV")
    _add_common(rp)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            print(harness.cmd_report(args.metrics, out_dir=args.out))
            return EXIT_OK
        cfg = load_config(args.config, sets=args.sets, seed=args.seed)
        if args.command == "profile":
            out = args.out or cfg["io.profile_dir"]
            paths = harness.cmd_profile(cfg, out)
            print(f"profiled {cfg['stream.num_tokens']} tokens -> {out}")
            print(f"stats: {len(paths['stats'])} layers, tae samples: {paths['tae']}")
        elif args.command == "build":
            out = args.out or cfg["io.build_dir"]
            paths = harness.cmd_build(cfg, out)
            print(paths["report"])
            print(f"tables -> {out}")
        elif args.command == "simulate":
            out = args.out or cfg["io.run_dir"]
            metrics, paths = harness.cmd_simulate(cfg, out)
            print(
                f"method={cfg['method']} cache_rate={cfg['cache.rate']} "
                f"tokens_per_s={metrics.tokens_per_s:.2f} "
                f"fidelity_cosine={metrics.fidelity_cosine:.4f} "
                f"read_mb={metrics.read_bytes / 1e6:.2f}"
            )
            print(f"metrics -> {paths['metrics']}")
        return EXIT_OK
    except _CONFIG_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except _INVARIANT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except BuddySimError as e:  # any stray package error counts as invariant
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
