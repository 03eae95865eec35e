import argparse
import logging
import sys
from typing import List, Optional

from app.commands import evaluate, export, gen, infer, sweep, train
from app.config import settings, validate_settings
from app.errors import EXIT_OK, GatingError
from app.utils.helpers import configure_torch

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
    format=settings.LOG_FORMAT,
)
logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=settings.PROJECT_NAME.lower(),
        description=settings.DESCRIPTION,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.VERSION}")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    gen.register(subparsers)
    train.register(subparsers)
    infer.register(subparsers)
    evaluate.register(subparsers)
    export.register(subparsers)
    sweep.register(subparsers)
    return parser


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Parse `argv`, run the subcommand and map failures to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse prints usage itself
        return e.code if isinstance(e.code, int) else 2

    try:
        validate_settings()
        configure_torch()
        logger.info(f"Running {args.command}")
        code = args.handler(args)
        logger.info(f"{args.command} complete")
        return code if code is not None else EXIT_OK

    except GatingError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return e.exit_code


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
