"""``parakernel <subcommand> --config PATH [--out DIR] [--seed N]``

Exit codes: 0 success, 1 configuration or runtime failure (including a
failed verification criterion), 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .experiments import EXPERIMENTS, run_experiment
from .report import ReportError, write_report


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="parakernel", description="Parabolic kernel and chemotaxis-fluid verification harness.")
    p.add_argument("command", choices=sorted(EXPERIMENTS), help="experiment to run")
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--out", default="parakernel-out", help="output directory (default: %(default)s)")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--quiet", action="store_true", help="suppress the criterion summary on stdout")
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        print(f"parakernel: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"parakernel: {exc}", file=sys.stderr)
        return 1
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        report = run_experiment(args.command, cfg, out)
        write_report(report, out)
    except (ConfigError, ReportError, OSError) as exc:
        print(f"parakernel: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, ArithmeticError, MemoryError) as exc:
        print(f"parakernel: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if not args.quiet:
        print(report.summary())
    return 0 if report.passed else 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
