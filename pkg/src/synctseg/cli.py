"""Command-line entry point.

Subcommands mirror the pipeline stages: ``phantom``, ``train-translate``,
``synthesize``, ``train-seg``, ``eval``, ``pipeline``, ``sweep-context``, and
``report``. All artifacts live under ``--out``: ``config.resolved``,
``checkpoints/``, ``metrics/``, ``report/``. Exit codes: 0 on success, 2 on
configuration errors, 3 on runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .report import emit_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

STAGE_COMMANDS = {
    "phantom": harness.stage_phantom,
    "train-translate": harness.stage_train_translate,
    "synthesize": harness.stage_synthesize,
    "train-seg": harness.stage_train_seg,
    "eval": harness.stage_eval,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="synctseg",
        description="Unpaired MR-to-CT synthesis and 2.5D segmentation experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, config_required: bool = True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, required=config_required,
                       help="experiment config file (flat key = value format)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=Path, required=True, help="run directory")
        return p

    add("phantom", "generate the phantom dataset pools")
    add("train-translate", "train the unpaired MR/CT translator")
    add("synthesize", "generate synthetic CT volumes with carried masks")
    add("train-seg", "train the 2.5D segmenter(s)")
    add("eval", "evaluate Dice on held-out data")
    add("pipeline", "run all stages end to end")
    sweep = add("sweep-context", "train one segmenter per context number")
    sweep.add_argument("--contexts", default="0,1",
                       help="comma-separated subset of 0,1,2,3 (default 0,1)")
    report = sub.add_parser("report", help="regenerate the report from a run directory")
    report.add_argument("--out", type=Path, required=True, help="run directory")
    return parser


def _load(args) -> ExperimentConfig:
    if args.config:
        try:
            cfg = load_config(args.config)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            emit_report(args.out)
            return EXIT_OK
        cfg = _load(args)
        out: Path = args.out
        if args.command == "pipeline":
            harness.run_pipeline(cfg, out)
        elif args.command == "sweep-context":
            contexts = [int(c) for c in str(args.contexts).replace(",", " ").split()]
            harness.context_sweep(cfg, out, contexts)
        elif args.command in STAGE_COMMANDS:
            out.mkdir(parents=True, exist_ok=True)
            save_config(cfg, out / "config.resolved")
            if args.command == "train-translate" and cfg.translate.cycle_mode == "both":
                raise ConfigError(
                    "train-translate needs a concrete cycle mode; use the pipeline "
                    "command for the ssim/mse comparison"
                )
            STAGE_COMMANDS[args.command](cfg, out)
        else:  # pragma: no cover - argparse enforces the choices
            parser.error(f"unknown command {args.command!r}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
