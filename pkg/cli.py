"""Command line entry point: ``lrm run|check|oracle|history``."""

import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

from app import configure_logging, create_app
from config import Config
from errors import ConfigError
from experiments import KINDS, MODES, RunReport, ScenarioConfig, emit_outputs, load_scenario, reference_report, run_scenario

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_CHECK_FAILED = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrm", description="Lattice spin simulator experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("run", "simulate a scenario and write its tables"),
        ("check", "simulate a scenario and evaluate its acceptance thresholds"),
        ("oracle", "write the analytic and oracle reference curves only"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("config", help=f"scenario JSON file, or one of: {', '.join(KINDS)}")
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--out", default=None, help="output directory (overrides LRM_OUT)")
        cmd.add_argument("--mode", choices=MODES, default=None)
        cmd.add_argument("--threads", type=int, default=None)
        cmd.add_argument("--n-p", dest="n_p", type=int, default=None, help="particles (pairs) per setting")

    history = sub.add_parser("history", help="list recorded runs")
    history.add_argument("--limit", type=int, default=20)
    history.add_argument("--kind", choices=KINDS, default=None)
    return parser


def _load(args: argparse.Namespace) -> ScenarioConfig:
    overrides = {"seed": args.seed, "mode": args.mode, "threads": args.threads, "n_p": args.n_p}
    if args.config in KINDS and not os.path.exists(args.config):
        return load_scenario({"kind": args.config}, overrides)
    return load_scenario(args.config, overrides)


def resolve_out_dir(cli_out: Optional[str], cfg: ScenarioConfig) -> str:
    return cli_out or os.environ.get("LRM_OUT") or cfg.out_dir or Config.OUTPUT_DIR


def _record(report: RunReport, out_dir: str, config_class=Config) -> Optional[int]:
    if config_class.DATABASE_DISABLED:
        return None
    from registry import record_run

    try:
        app = create_app(config_class)
        with app.app_context():
            return record_run(report, out_dir).id
    except Exception as exc:  # noqa: BLE001
        logger.exception("Recording the run failed: %s", exc)
        return None


def _print_report(report: RunReport) -> None:
    print(f"{report.kind} ({report.mode}) seed={report.provenance['seed']} hash={report.provenance['config_hash'][:12]}")
    for key in ("max_deviation", "tv_oracle", "accepted_fraction", "chsh", "contrast"):
        if key in report.summary:
            print(f"  {key}: {report.summary[key]}")
    for check in report.checks:
        status = "PASS" if check.passed else "FAIL"
        print(f"  [{status}] {check.name}: {check.value:.6g} (threshold {check.threshold:.6g}) {check.detail}".rstrip())


def _simulate(args: argparse.Namespace, config_class) -> int:
    cfg = _load(args)
    out_dir = resolve_out_dir(args.out, cfg)
    if args.command == "oracle":
        report = reference_report(cfg)
        emit_outputs(report, out_dir)
        _print_report(report)
        return EXIT_OK
    report = run_scenario(cfg, out_dir, check=args.command == "check")
    run_id = _record(report, out_dir, config_class)
    _print_report(report)
    if run_id is not None:
        print(f"  recorded as run {run_id}")
    if args.command == "check" and not report.passed:
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _history(args: argparse.Namespace, config_class) -> int:
    from registry import recent_runs, run_payload

    app = create_app(config_class)
    with app.app_context():
        rows: List[Dict[str, Any]] = [run_payload(run) for run in recent_runs(args.limit, args.kind)]
    for row in rows:
        passed = "-" if row["passed"] is None else ("pass" if row["passed"] else "FAIL")
        chsh = "" if row["chsh"] is None else f" S={row['chsh']:.4f}"
        print(
            f"{row['id']:>5}  {row['created_at']}  {row['kind']:<14} {row['mode']:<16} "
            f"seed={row['seed']} N={row['n_particles']} {passed}{chsh}"
        )
    if not rows:
        print("no recorded runs")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None, config_class=Config) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(config_class.LOG_DIR, config_class.LOG_LEVEL)
    try:
        if args.command == "history":
            return _history(args, config_class)
        return _simulate(args, config_class)
    except ConfigError as exc:
        logger.error("Invalid configuration: %s", exc)
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        path = exc.filename or ""
        logger.error("I/O failure on %s: %s", path, exc)
        print(f"I/O error: {path}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
