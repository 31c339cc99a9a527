"""Command-line entry point.

Usage:
    entnet run <scenario.json> [--seed N] [--out DIR]
    entnet reproduce <figure> [--seed N] [--out DIR]
    entnet validate <scenario.json>

Exit codes: 0 success, 2 configuration/usage error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError, EntnetError
from .presets import FIGURES
from .runner import load_scenario, reproduce_figure, run_stages

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _parser():
    p = argparse.ArgumentParser(prog="entnet",
                                description="Three-node entanglement-distribution "
                                            "network simulator")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file through the bring-up stages")
    run.add_argument("scenario", help="path to a scenario JSON file")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--out", default="entnet-out", help="output directory")

    rep = sub.add_parser("reproduce", help="run a named reproduction preset")
    rep.add_argument("figure", help=f"one of: {', '.join(sorted(FIGURES))}")
    rep.add_argument("--seed", type=int, default=None)
    rep.add_argument("--out", default="entnet-out")

    val = sub.add_parser("validate", help="check a scenario file and exit")
    val.add_argument("scenario", help="path to a scenario JSON file")
    return p


def _report(manifest):
    for stage in manifest.stages:
        status = "skip" if stage.skipped else ("pass" if stage.passed else "FAIL")
        line = f"[{status}] {stage.name}"
        if stage.error:
            line += f": {stage.error}"
        print(line)
    if manifest.ok:
        print(f"run {manifest.run_uuid} complete")
        return EXIT_OK
    print(f"run {manifest.run_uuid} halted at stage {manifest.failed_stage}",
          file=sys.stderr)
    return EXIT_STAGE


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "validate":
            load_scenario(args.scenario)
            print("scenario ok")
            return EXIT_OK
        if args.command == "run":
            manifest = run_stages(load_scenario(args.scenario), args.out, seed=args.seed)
            return _report(manifest)
        manifest = reproduce_figure(args.figure, args.out, seed=args.seed)
        return _report(manifest)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EntnetError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
