"""Command-line entry point: ``crossdiff-lab --config run.json [--out DIR] [--seed N] [--quiet]``.

Exit status
-----------
* 0: the experiment ran and every check passed
* 1: configuration error (unreadable or invalid config, inadmissible model,
  domain error)
* 2: the experiment ran but at least one check failed
* 3: numeric failure; the path of the diagnostic snapshot is printed
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from src.config import settings
from src.experiment_service import experiment_service
from src.models import RunConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CHECK_FAILED = 2
EXIT_NUMERIC = 3

_NUMERIC_ERRORS = {"NumericError", "CFLViolationError", "OptimizerStallError"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossdiff-lab",
        description="Steady states, gradient flows and Lyapunov checks for two-species cross-diffusion aggregation",
    )
    parser.add_argument("--config", required=True, help="Run configuration (JSON)")
    parser.add_argument("--out", default=None, help="Output directory (default: config output_dir)")
    parser.add_argument("--seed", type=int, default=None, help="Seed for all random sampling (overrides the config)")
    parser.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    return parser


def load_config(path: str, seed: Optional[int] = None) -> RunConfig:
    """Read and validate a run configuration; --seed overrides its seed."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if seed is not None:
        payload["seed"] = seed
    return RunConfig.model_validate(payload)


def exit_code(result: dict) -> int:
    if result["success"]:
        return EXIT_OK if result["passed"] else EXIT_CHECK_FAILED
    if result["error_type"] in _NUMERIC_ERRORS:
        return EXIT_NUMERIC
    return EXIT_CONFIG


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else settings.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        config = load_config(args.config, args.seed)
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        logger.error(f"[CLI] Invalid configuration {args.config}: {e}")
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG

    result = experiment_service.run(config, args.out)
    code = exit_code(result)
    if result["success"]:
        print(result["message"])
    else:
        print(f"error: {result['error_type']}: {result['error']}", file=sys.stderr)
        if "snapshot_path" in result:
            print(f"diagnostic snapshot: {result['snapshot_path']}", file=sys.stderr)
    logger.info(f"[CLI] exit status {code}")
    return code


if __name__ == "__main__":
    sys.exit(main())
