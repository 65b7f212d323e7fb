"""Command-line entry point.

    hypwalk run --config exp.toml --out results/
    hypwalk laplace --config exp.toml --out results/
    hypwalk verify-transforms --config exp.toml
    hypwalk report --out results/

Exit codes: 0 ok, 1 assertion failure, 2 configuration error, 3 solver
divergence.
"""

from __future__ import annotations

import argparse
import sys

from .config import default_config, load_config
from .errors import ConfigError, SolverDivergedError
from .harness import (
    EXIT_CONFIG,
    EXIT_SOLVER,
    STAGES,
    render_report_dir,
    run_pipeline,
)

_RUNNABLE = [name for name in STAGES] + ["run"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hypwalk",
        description="random-walk deviation laboratory on hyperbolic models",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ["run", "simulate", "solve-psi", "laplace", "rate",
                 "verify-transforms", "verify-qv", "verify-bounds"]:
        p = sub.add_parser(name, help=f"{name} stage" if name != "run" else "full pipeline")
        p.add_argument("--config", help="TOML experiment file (defaults built in)")
        p.add_argument("--seed", type=int, help="override run.master_seed")
        p.add_argument("--workers", type=int, help="override run.workers")
        p.add_argument("--out", help="output directory (overrides run.out_dir)")
    rep = sub.add_parser("report", help="render an artifact directory")
    rep.add_argument("--out", required=True, help="artifact directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        return render_report_dir(args.out)
    try:
        cfg = load_config(args.config) if args.config else default_config()
        if args.seed is not None:
            cfg.master_seed = int(args.seed)
            cfg.raw.setdefault("run", {})["master_seed"] = int(args.seed)
        if args.workers is not None:
            cfg.workers = int(args.workers)
        out_dir = args.out or cfg.out_dir
        stages = None if args.command == "run" else [args.command]
        report = run_pipeline(cfg, stages=stages, out_dir=out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverDivergedError as exc:
        print(f"solver diverged: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    counts = report.assertion_counts()
    print(f"{args.command}: {counts['pass']} pass, {counts['fail']} fail, "
          f"{counts['inconclusive']} inconclusive "
          f"(config {report.config_hash}, artifacts in {out_dir})")
    for a in report.assertions:
        if a.status != "pass":
            print(f"  {a.status.upper()}: {a.name} - {a.detail}")
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
