"""
Linha de comando do pipeline de ramos de trajetória.

Uso: python app/main.py <subcomando> --config app/settings.yaml [--out-dir DIR]
"""
import argparse
import logging
import sys
from pathlib import Path

import config
from config import ConfigError, load_config, setup_logging

from components.pipeline import (ARTIFACTS, FIGURE, STAGES, PipelineError, maze_spec, plot_branches, report,
                                 run_stage)

logger = logging.getLogger("main")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PIPELINE = 2

SUBCOMMANDS = STAGES + ("all", "plot", "report")


class UsageError(Exception):
    """Erro de uso da linha de comando"""


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="bg", description="Geração de ramos de trajetória por difusão + Decision Transformer")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=True, help="YAML de execução")
        p.add_argument("--out-dir", type=Path, default=None, help="Diretório de artefatos")
        p.add_argument("--stage-seed-override", type=int, default=None,
                       help="Semente mestre (all) ou semente só do estágio indicado")
        p.add_argument("--baseline", action="store_true", help="DT sobre o dataset não expandido")
    return parser


def dispatch(args) -> int:
    run_config = load_config(args.config)
    out_dir = args.out_dir or config.OUT_DIR
    if args.command == "report":
        print(report(out_dir))
    elif args.command == "plot":
        out = plot_branches(out_dir / ARTIFACTS["collect"]["dataset"],
                            out_dir / ARTIFACTS["gen-branches"]["candidates"], out_dir / FIGURE,
                            maze_spec(run_config))
        print(out)
    else:
        if args.baseline and args.command not in ("train-dt", "eval", "all"):
            raise UsageError("--baseline só se aplica a train-dt, eval e all")
        delta = run_stage(run_config, args.command, out_dir, args.stage_seed_override, args.baseline)
        for stage, entry in delta.items():
            logger.info("%s concluído em %.1fs", stage, entry["seconds"])
    return EXIT_OK


def main(argv=None) -> int:
    setup_logging()
    try:
        args = build_parser().parse_args(argv)
        return dispatch(args)
    except (UsageError, ConfigError) as e:
        logger.error("Erro de uso: %s", e)
        return EXIT_USAGE
    except PipelineError as e:
        logger.error("Erro no pipeline: %s", e)
        return EXIT_PIPELINE
    except Exception as e:
        logger.exception("Erro inesperado: %s", e)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
