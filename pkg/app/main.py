"""Main application module for the point-guided cascade simulator.

This module parses the command line and dispatches to the experiment
runner: ``run``, ``ablate``, ``gradcheck``, ``train`` and ``gen-corpus``.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from dotenv import load_dotenv

from app.core.experiment import load_corpus, run_ablation, run_experiment, run_gradcheck, train_toys
from app.utils.config import load_config, write_config
from app.utils.scene_generator import save_scenes

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "CASCADE_LOG_LEVEL"


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"Expected comma-separated numbers, got {text!r}") from e


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"Expected comma-separated integers, got {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    """Create the argument parser with one subparser per command."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment configuration")
    common.add_argument("--seed", type=int, help="Override the configured seed")
    common.add_argument("--out", help="Override the output directory")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="Patch a config value, e.g. cascade.grid_loss_weight=0.5 (repeatable)")
    common.add_argument("--log-level", default=None, help=f"Logging level (default: ${LOG_LEVEL_ENV} or INFO)")

    parser = argparse.ArgumentParser(prog="cascade-sim", description="Point-guided cascade box refinement simulator")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", parents=[common], help="Run one experiment")
    run.add_argument("--gamma-sweep", type=_float_list, default=[], help="Also evaluate these gammas, e.g. 1,0.9,0.8")

    ablate = commands.add_parser("ablate", parents=[common], help="Run the CMM/ISM/RSM ablation matrix")
    ablate.add_argument("--seeds", type=_int_list, default=[], help="Repeat the matrix over these seeds")

    gradcheck = commands.add_parser("gradcheck", parents=[common], help="Check toy model gradients")
    gradcheck.add_argument("--corrupt", action="store_true", help="Double one analytic coordinate (must fail)")

    commands.add_parser("train", parents=[common], help="Train the toy heatmap model, ISM and RSM")
    commands.add_parser("gen-corpus", parents=[common], help="Write the configured scene corpus as JSON")
    return parser


def _configure_logging(level_name: Optional[str]) -> None:
    level_name = (level_name or os.getenv(LOG_LEVEL_ENV) or "INFO").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        raise ValueError(f"Unknown log level: {level_name}")
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _configure_logging(args.log_level)
    except ValueError as e:
        parser.error(str(e))

    try:
        config = load_config(args.config, args.override, args.seed, args.out)
        if args.command == "run":
            run_experiment(config, args.gamma_sweep)
        elif args.command == "ablate":
            table = run_ablation(config, seeds=args.seeds)
            failed = table[table["status"] != "ok"]
            if len(failed):
                logger.error(f"{len(failed)} ablation row(s) failed: {', '.join(failed['row'])}")
                return 1
        elif args.command == "gradcheck":
            reports = run_gradcheck(config, corrupt=args.corrupt)
            failures = {name: r for name, r in reports.items() if not r.passed}
            for name, report in failures.items():
                logger.error(
                    f"Gradcheck {name} failed at coordinate {report.worst_coordinate}: "
                    f"relative error {report.max_relative_error:.3e} > {report.tolerance:g}"
                )
            if failures:
                return 1
        elif args.command == "train":
            train_toys(config)
        elif args.command == "gen-corpus":
            out = Path(config.output_dir)
            save_scenes(load_corpus(config), out / "corpus.json")
            write_config(config, out)
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        logger.debug("Traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
