"""Command-line front end: ``switchlq validate <config>`` and ``switchlq run <config>``.

Exit codes: 0 all checks passed, 1 some check failed, 2 invalid configuration,
3 solver or simulation error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import config
from ._mc import THREADS_ENV
from .exceptions import ConfigError, SwitchLQError

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_ERROR = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="switchlq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    v = sub.add_parser("validate", help="check a configuration and list violations")
    v.add_argument("config")
    r = sub.add_parser("run", help="solve, run the configured experiments and write outputs")
    r.add_argument("config")
    r.add_argument("--output-dir", help="overrides output_dir from the configuration")
    r.add_argument("--seed-override", type=int, help="replaces monte_carlo.root_seed")
    r.add_argument("--threads", type=int, help=f"worker threads for Monte-Carlo (default: ${THREADS_ENV} or 1)")
    return p


def _load(path):
    try:
        return config.load(path), None
    except (OSError, json.JSONDecodeError) as exc:
        return None, f"{path}: {exc}"


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    cfg, err = _load(args.config)
    if err:
        print(err, file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        errs = config.validate(cfg)
        for e in errs:
            print(e)
        if not errs:
            print("ok")
        return EXIT_CONFIG if errs else EXIT_OK
    try:
        result = config.run(cfg, output_dir=args.output_dir, seed_override=args.seed_override, threads=args.threads)
    except ConfigError as exc:
        for e in exc.violations:
            print(e, file=sys.stderr)
        return EXIT_CONFIG
    except SwitchLQError as exc:
        print(f"{type(exc).__name__} while running {args.config}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for r in result.rows:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.experiment} {r.label} {r.metric}={r.value:.6g} ({r.test} {r.tolerance:.3g})")
    print(f"outputs in {result.output_dir}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
