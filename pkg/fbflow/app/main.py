from __future__ import annotations

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from ..config import settings
from .errors import BudgetExceeded, ConfigError, FBFlowError
from .experiments import prepare, run
from .models import EXPERIMENTS, ExperimentConfig

logger = logging.getLogger(__name__)

EXIT_PASS = 0
EXIT_CRITERION = 1
EXIT_CONFIG = 2
EXIT_BUDGET = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fbflow",
        description="Forward-backward splitting: certified bounds, flows and asymptotic experiments.",
    )
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        cmd = sub.add_parser(name, help=f"run the {name} experiment")
        cmd.add_argument("--config", required=True, help="KEY=VALUE experiment file")
        cmd.add_argument("--seed", type=int, default=None, help="overrides SEED from the config")
        cmd.add_argument("--out", default=None, help="output directory for CSV and summary.json")
        cmd.add_argument("--dry-run", action="store_true", help="validate the config and exit")
        cmd.add_argument("--jobs", type=int, default=None, help="worker threads")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=settings.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    overrides: Dict[str, Any] = {"experiment": args.experiment}
    if args.seed is not None:
        overrides["seed"] = args.seed

    try:
        config = ExperimentConfig.from_file(args.config, overrides)
        if args.jobs is not None and args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
        if args.dry_run:
            ctx = prepare(config, args.out, args.jobs)
            logger.info(f"Конфигурация в порядке: {config.experiment} на {ctx.problem.id}, Theta={ctx.problem.Theta:.6g}")
            return EXIT_PASS
        summary = run(config, args.out, args.jobs)
    except (ConfigError, ValidationError) as exc:
        logger.error(f"Ошибка конфигурации: {exc}")
        return EXIT_CONFIG
    except BudgetExceeded as exc:
        logger.error(f"Бюджет шагов исчерпан: {exc} (нужно {exc.required})")
        return EXIT_BUDGET
    except FBFlowError as exc:
        # InvalidInput и подклассы
        logger.error(f"Недопустимые параметры эксперимента: {exc}")
        return EXIT_CONFIG

    print(summary.describe())
    return EXIT_PASS if summary.passed else EXIT_CRITERION


if __name__ == "__main__":
    sys.exit(main())
