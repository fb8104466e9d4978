"""``latent-atlas`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 stage failure.
"""
from __future__ import annotations

import argparse
import sys

from . import __version__
from .config import ConfigError, load_config
from .dataio import DataError
from .io_utils import write_json
from .pipeline import STAGES, StageFailure, StageOrderError, build_report, run_pipeline, run_stage, stage_report

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_STAGE = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latent-atlas", description="Latent-space analytics pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run",) + STAGES:
        sp = sub.add_parser(name, help="run every stage" if name == "run" else f"run the {name} stage")
        sp.add_argument("--config", required=True, help="pipeline config (JSON)")
        sp.add_argument("--out", default=None, help="output directory (overrides config and LATENT_ATLAS_OUT)")
        sp.add_argument("--threads", type=int, default=None, help="worker threads (overrides config)")
        if name == "map":
            sp.add_argument("--target", default=None, help="map a single target, e.g. 'label=9' or '9'")
            sp.add_argument("--method", default=None, choices=["pearson", "point-biserial", "point_biserial"])
    return p


def _code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    return EXIT_STAGE


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.out, args.threads)
    except ConfigError as exc:
        print(f"latent-atlas: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "run":
        try:
            report = run_pipeline(cfg)
        except StageFailure as exc:
            print(f"latent-atlas: {exc} (partial report in {cfg.out / 'report.json'})", file=sys.stderr)
            return _code_for(exc.cause)
        print(f"latent-atlas: run complete, report at {cfg.out / 'report.json'} ({len(report['clusters'])} maps)")
        return EXIT_OK
    cfg.out.mkdir(parents=True, exist_ok=True)
    kwargs = {}
    if args.command == "map":
        kwargs = {"target": args.target, "method": args.method}
    try:
        if args.command == "report":
            stage_report(cfg)
        else:
            run_stage(cfg, args.command, **kwargs)
    except Exception as exc:
        print(f"latent-atlas: {args.command}: {exc}", file=sys.stderr)
        if not isinstance(exc, StageOrderError):
            try:
                write_json(cfg.out / "report.json", build_report(
                    cfg, failure={"failed_stage": args.command, "error": f"{type(exc).__name__}: {exc}"}))
            except Exception:
                pass
        return _code_for(exc)
    print(f"latent-atlas: {args.command} done")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
