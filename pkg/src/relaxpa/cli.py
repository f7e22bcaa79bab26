"""Command-line runner.

    relaxpa run --config lq_benchmark --out out/
    relaxpa solve-bsde --config bsde_xt --out out/ --seed 3

Exit codes: 0 all verdicts pass, 1 some verdict fails, 2 usage/config error
(including a missing prerequisite artifact), 3 runtime error.
"""

import argparse
import json
import os
import sys
from pathlib import Path

from .config import STAGES, bundled_config_path, load_config
from .errors import ConfigError, DependencyError
from .measure import THREADS_ENV

EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, help="YAML file or the name of a bundled config")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--out", help="output directory (default: output.dir)")
    common.add_argument("--threads", type=int, help=f"worker threads (overrides ${THREADS_ENV})")
    common.add_argument("--format", choices=("csv", "json"), help="table format")
    p = _Parser(prog="relaxpa", description="Relaxed-control principal-agent experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("run", parents=[common], help="run the stages listed in run.stages")
    for s in STAGES:
        sub.add_parser(s, parents=[common], help=f"run the {s} stage")
    return p


def _resolve_config(arg):
    path = Path(arg)
    if path.exists():
        return path
    if path.suffix in ("", ".yaml") and "/" not in arg:
        return bundled_config_path(arg)
    raise ConfigError(f"config file not found: {arg}")


def main(argv=None):
    from .pipeline import run_stages

    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be positive")
        overrides = {}
        if args.seed is not None:
            overrides["run.seed"] = args.seed
        if args.threads is not None:
            os.environ[THREADS_ENV] = str(args.threads)
        cfg = load_config(_resolve_config(args.config), overrides)
        out = Path(args.out or cfg.output.dir)
        fmt = args.format or cfg.output.format
        stages = list(cfg.run.stages) if args.command == "run" else [args.command]
        report = run_stages(cfg, out, stages, fmt=fmt)
    except (ConfigError, DependencyError) as exc:
        print(f"relaxpa: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # surface the failing stage and exit 3
        stage = getattr(exc, "stage", None) or "?"
        print(f"relaxpa: error in stage '{stage}': {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for name, ok in report["verdicts"].items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(json.dumps({"out": str(out), "passed": report["passed"]}))
    return EXIT_PASS if report["passed"] else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
