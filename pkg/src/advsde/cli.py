"""Command-line entry point for the experiment harness.

Usage::

    advsde <experiment-name> --config <path> [--seed N] [--out DIR]
           [--profile fast|paper] [--assert]

Exit codes: 0 on success, 2 on a configuration error, 3 when ``--assert``
is given and at least one of the run's checks failed.  The ``ADVSDE_OUT``
environment variable overrides the config file's output directory; the
``--out`` flag overrides both.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Sequence

from .config import (
    EXPERIMENT_NAMES,
    ConfigError,
    normalize_experiment_name,
    parse_config,
)
from .experiments import run_experiment

OUT_DIR_ENV = "ADVSDE_OUT"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advsde",
        description="Run one experiment from a TOML config and write CSV/JSON artifacts.",
    )
    parser.add_argument(
        "experiment",
        metavar="experiment-name",
        help="one of: " + ", ".join(n.replace("_", "-") for n in EXPERIMENT_NAMES),
    )
    parser.add_argument("--config", required=True, help="path to the TOML config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument(
        "--out",
        default=None,
        help=f"output directory (overrides the config and ${OUT_DIR_ENV})",
    )
    parser.add_argument(
        "--profile",
        choices=("fast", "paper"),
        default=None,
        help="override the config profile",
    )
    parser.add_argument(
        "--assert",
        dest="assert_checks",
        action="store_true",
        help="exit 3 when any of the run's checks fails",
    )
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = args.out if args.out is not None else os.environ.get(OUT_DIR_ENV)
    try:
        requested = normalize_experiment_name(args.experiment)
        config = parse_config(
            args.config, seed=args.seed, out_dir=out_dir, profile=args.profile
        )
        if config.experiment != requested:
            raise ConfigError(
                f"config is for {config.experiment.replace('_', '-')!r}, "
                f"not {args.experiment!r}"
            )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    report = run_experiment(config)
    print(f"{report.experiment} (seed {report.seed}, profile {report.profile})")
    for name, ok in report.checks.items():
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}")
    print(f"  wall time: {report.wall_time_s:.2f}s")
    for artifact in report.artifacts:
        print(f"  wrote {artifact}")
    if args.assert_checks and not report.passed:
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
