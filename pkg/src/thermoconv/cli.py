"""Command line entry point.

Usage: thermoconv <experiment> --config <path> --out <dir> [--seed N]

Runs one experiment from a JSON config, writes <out>/<experiment>.csv and
<out>/<experiment>.json, prints a verdict summary and exits 0 iff all
require_* verdicts in the config hold.  THERMOCONV_THREADS optionally caps
worker threads used by path ensembles.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ThermoconvError
from .harness import EXPERIMENTS, ExperimentConfig, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thermoconv",
        description="thermodynamic-convergence experiments for singularly "
        "perturbed diffusions",
    )
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", required=True, help="JSON config path")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument(
        "--seed", type=int, default=None, help="override the config seed"
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    raw["experiment"] = args.experiment
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        config = ExperimentConfig.from_dict(raw)
        result = run(config, out_dir=args.out)
    except ThermoconvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for name, value in sorted(result.verdicts.items()):
        marker = "required" if config.require.get(name) else "reported"
        print(f"{args.experiment}: {name} = {'PASS' if value else 'FAIL'} ({marker})")
    print(f"{args.experiment}: wrote {args.out}/{args.experiment}.csv and .json")
    if result.status != 0:
        print(
            f"{args.experiment}: required verdicts failed: "
            + ", ".join(result.extra.get("required_failed", [])),
            file=sys.stderr,
        )
    return result.status


if __name__ == "__main__":
    raise SystemExit(main())
