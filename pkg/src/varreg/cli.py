"""Command line entry point: ``varreg <study> --config <path.json> --out <dir>``.

Exit codes: 0 when every verdict passes, 1 when some verdict fails,
2 on configuration errors, 3 on solver failures.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .errors import ConfigError, DomainError, PreconditionError, SolverError
from .experiments import STUDIES, ExperimentConfig, run_study

EXIT_OK, EXIT_VERDICT, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="varreg", description=__doc__.splitlines()[0])
    p.add_argument("study", choices=STUDIES)
    p.add_argument("--config", required=True, help="JSON problem configuration")
    p.add_argument("--out", required=True, help="output directory for the CSV reports")
    p.add_argument("--trace", action="store_true", help="write per-iteration solver trace.csv")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = ExperimentConfig.from_json(args.config)
        if config.study != args.study:
            raise ConfigError(f"config is for study {config.study!r}, not {args.study!r}")
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        os.makedirs(args.out, exist_ok=True)
        trace_path = os.path.join(args.out, "trace.csv") if args.trace else None
        if trace_path and os.path.exists(trace_path):
            os.remove(trace_path)
        report = run_study(config, jobs=args.jobs, trace_path=trace_path)
    except (ConfigError, PreconditionError) as exc:
        print(f"varreg: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"varreg: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except DomainError as exc:
        print(f"varreg: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report.write(args.out)
    for caveat in report.caveats:
        print(f"caveat: {caveat}")
    for v in report.verdicts:
        print(f"{'PASS' if v['passed'] else 'FAIL'} {v['name']}: {v['value']!r} ({v['threshold']})")
    return EXIT_OK if report.passed else EXIT_VERDICT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
