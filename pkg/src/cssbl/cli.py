"""``cssbl`` command: run, validate or replay an experiment sweep."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys

import yaml

from .experiment import (EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, ExperimentSpec,
                         run_cell, run_experiment, validate)

logger = logging.getLogger("cssbl")


def _parse_replay(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected k,method,trial")
    try:
        return float(parts[0]), parts[1], int(parts[2])
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser():
    p = argparse.ArgumentParser(
        prog="cssbl",
        description="Seeded correlation sweeps for clustered, block-correlated variance diagnosis.")
    p.add_argument("--spec", required=True, help="experiment spec (YAML)")
    p.add_argument("--out", help="output directory (overrides the spec file)")
    p.add_argument("--trials", type=int, help="trials per cell (overrides the spec file)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--replay", type=_parse_replay, metavar="K,METHOD,TRIAL",
                   help="rerun one cell and print its result as JSON")
    p.add_argument("--validate-only", action="store_true",
                   help="report spec problems and exit")
    p.add_argument("--traces", action="store_true",
                   help="write per-trial convergence traces")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _replay(spec, k, method, trial, traces):
    matches = [s for s in spec.sweep if math.isclose(s, k, rel_tol=0, abs_tol=1e-12)]
    if not matches:
        print(f"error: k={k} is not in the sweep {spec.sweep}", file=sys.stderr)
        return EXIT_INVALID
    if method not in {m.name for m in spec.methods}:
        print(f"error: unknown method {method!r}", file=sys.stderr)
        return EXIT_INVALID
    if not 0 <= trial < spec.trials:
        print(f"error: trial {trial} outside 0..{spec.trials - 1}", file=sys.stderr)
        return EXIT_INVALID
    (entry,) = run_cell(spec, matches[0], trial, method_names={method},
                        keep_trace=traces, phi=spec.load_phi())
    json.dump(entry, sys.stdout, indent=2, default=str)
    print()
    return EXIT_NUMERICAL if "error" in entry else EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = ExperimentSpec.load(args.spec)
    except (OSError, ValueError, TypeError, yaml.YAMLError) as exc:
        print(f"error: cannot load spec: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.trials is not None:
        spec.trials = args.trials
    if args.out is not None:
        spec.output = args.out

    problems = validate(spec)
    for problem in problems:
        print(f"invalid: {problem}", file=sys.stderr)
    if problems:
        return EXIT_INVALID
    if args.validate_only:
        print("spec is valid")
        return EXIT_OK
    if args.replay is not None:
        return _replay(spec, *args.replay, traces=args.traces)

    status = run_experiment(spec, spec.output, jobs=max(1, args.jobs), keep_traces=args.traces)
    if status == EXIT_NUMERICAL:
        print(f"numerical failures recorded in {spec.output}/manifest.json", file=sys.stderr)
    logger.info("wrote %s/results.csv", spec.output)
    return status


if __name__ == "__main__":
    sys.exit(main())
