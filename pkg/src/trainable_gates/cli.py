#!/usr/bin/env python3
"""
🖥️ Interface en ligne de commande

    trainable-gates run <config>
    trainable-gates prune <checkpoint> --emit <path>
    trainable-gates report <checkpoint> [--kind flops|params|channels]
    trainable-gates oracle <config> [--budget k]
    trainable-gates plot <run_dir>
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

import colorlog
from dotenv import load_dotenv

from .autodiff import TGFError
from .budget import CostKind, cost_report, format_cost_report, total_cost_static
from .checkpoint import load_checkpoint, load_metadata, save_checkpoint
from .config import DatasetSource, load_experiment_config
from .experiments import EXIT_CONFIG, EXIT_OK, LOG_FORMAT, exit_code, load_datasets, run_experiment
from .layers import hard_prune
from .oracle import brute_force_select

logger = logging.getLogger(__name__)


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """
    Configure le logger racine : console colorée, fichier optionnel

    Niveau et fichier par défaut lus dans LOG_LEVEL et LOG_FILE.
    """
    level_name = (level or os.getenv("LOG_LEVEL", "INFO")).upper()
    log_file = log_file or os.getenv("LOG_FILE")
    root = logging.getLogger()
    root.setLevel(getattr(logging, level_name, logging.INFO))
    for handler in list(root.handlers):
        root.removeHandler(handler)

    console = colorlog.StreamHandler()
    console.setFormatter(colorlog.ColoredFormatter(
        "%(log_color)s" + LOG_FORMAT,
        log_colors={
            "DEBUG": "cyan",
            "INFO": "green",
            "WARNING": "yellow",
            "ERROR": "red",
            "CRITICAL": "bold_red",
        },
    ))
    root.addHandler(console)
    if log_file:
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(file_handler)


def cmd_run(args: argparse.Namespace) -> int:
    return run_experiment(args.config)


def cmd_prune(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    result = hard_prune(model)
    metadata = {**load_metadata(args.checkpoint), "pruned_from": str(args.checkpoint)}
    save_checkpoint(result.model, args.emit, metadata)
    for row in result.report:
        print(f"{row['layer']:<16}{row['kind']:<10}{row['channels_before']:>6} -> {row['channels_after']}")
    kind = CostKind(args.kind)
    print(f"{kind.value}: {total_cost_static(model, kind)} -> {total_cost_static(result.model, kind)}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    kind = CostKind(args.kind)
    print(format_cost_report(cost_report(model, kind), kind), end="")
    return EXIT_OK


def cmd_oracle(args: argparse.Namespace) -> int:
    config = load_experiment_config(args.config)
    if config.dataset.source is not DatasetSource.SYNTHETIC_PLANTED:
        logger.error("❌ L'oracle requiert un jeu synthetic_planted")
        return EXIT_CONFIG
    train, _ = load_datasets(config.dataset, config.seed)
    budget = args.budget if args.budget is not None else config.dataset.k_relevant
    result = brute_force_select(train, budget)
    print(f"relevant: {train.meta['relevant']}")
    print(f"subset: {list(result.subset)}")
    print(f"loss: {result.loss!r}")
    print(f"evaluated: {result.evaluated}")
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    from .plots import render_run

    for path in render_run(args.run_dir):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trainable-gates",
        description="Portes entraînables et élagage sous budget de calcul",
    )
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING... (défaut: LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Exécute une expérience")
    run.add_argument("config", help="Fichier YAML d'expérience")
    run.set_defaults(func=cmd_run)

    prune = sub.add_parser("prune", help="Élague un point de sauvegarde")
    prune.add_argument("checkpoint")
    prune.add_argument("--emit", required=True, help="Point de sauvegarde compact à écrire")
    prune.add_argument("--kind", default="flops", choices=[k.value for k in CostKind])
    prune.set_defaults(func=cmd_prune)

    report = sub.add_parser("report", help="Tableau de coût d'un point de sauvegarde")
    report.add_argument("checkpoint")
    report.add_argument("--kind", default="flops", choices=[k.value for k in CostKind])
    report.set_defaults(func=cmd_report)

    oracle = sub.add_parser("oracle", help="Sélection exhaustive sur un jeu planté")
    oracle.add_argument("config")
    oracle.add_argument("--budget", type=int, default=None)
    oracle.set_defaults(func=cmd_oracle)

    plot = sub.add_parser("plot", help="Figures d'une exécution")
    plot.add_argument("run_dir")
    plot.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except TGFError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return exit_code(e)
    except KeyboardInterrupt:
        logger.warning("⏹️ Interrompu par l'utilisateur")
        return 130


if __name__ == "__main__":
    sys.exit(main())
