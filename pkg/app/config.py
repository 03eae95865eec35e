from pydantic_settings import BaseSettings, SettingsConfigDict
import logging

from app.errors import ConfigError

logger = logging.getLogger(__name__)


class Settings(BaseSettings):

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    # Environment
    ENVIRONMENT: str = "development"

    # Reproducibility
    DEFAULT_SEED: int = 0
    TORCH_NUM_THREADS: int = 1

    # Training metrics stream, written next to the checkpoint
    METRICS_LOG_NAME: str = "metrics.jsonl"

    # Project
    PROJECT_NAME: str = "OmniGate"
    VERSION: str = "1.0.0"
    DESCRIPTION: str = "Streaming proactive/reactive speak gating over synthetic audio-video units"

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore"
    )


# Create global settings instance
settings = Settings()


def validate_settings():
    """Validate environment settings before any subcommand runs."""
    problems = []

    if logging.getLevelName(settings.LOG_LEVEL.upper()) not in (
        logging.DEBUG, logging.INFO, logging.WARNING, logging.ERROR, logging.CRITICAL
    ):
        problems.append(f"LOG_LEVEL={settings.LOG_LEVEL!r} is not a logging level")

    if settings.TORCH_NUM_THREADS < 1:
        problems.append("TORCH_NUM_THREADS must be >= 1")

    if settings.DEFAULT_SEED < 0:
        problems.append("DEFAULT_SEED must be >= 0")

    if problems:
        raise ConfigError(
            f"Invalid environment settings: {'; '.join(problems)}\n"
            f"Please check your .env file."
        )

    if settings.ENVIRONMENT == "development":
        logger.debug(
            f"Configuration loaded: environment={settings.ENVIRONMENT}, "
            f"log_level={settings.LOG_LEVEL}, seed={settings.DEFAULT_SEED}, "
            f"torch_threads={settings.TORCH_NUM_THREADS}"
        )
