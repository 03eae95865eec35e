import argparse
import logging
from typing import Any, Optional, TypeVar

from pydantic import BaseModel, ValidationError

from app.errors import ConfigError
from app.models import RunConfig
from app.storage import load_run_config

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)


def add_config_argument(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default=None, help="RunConfig JSON file (defaults apply to omitted fields)")


def load_config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(getattr(args, "config", None))


def override(model: M, **updates: Optional[Any]) -> M:
    """Re-validate `model` with every non-None flag value applied on top."""
    values = model.model_dump()
    values.update({k: v for k, v in updates.items() if v is not None})
    try:
        return type(model).model_validate(values)
    except ValidationError as e:
        raise ConfigError(f"invalid {type(model).__name__}: {e}") from e


def parse_list(text: str, cast=float) -> list:
    try:
        return [cast(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise ConfigError(f"cannot parse list '{text}': {e}") from e
