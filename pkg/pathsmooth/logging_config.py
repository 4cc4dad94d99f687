import logging
import os
from logging.config import dictConfig


class ShortNameFilter(logging.Filter):
    """Strip a package prefix from logger names in emitted records.

    'pathsmooth.mhips' is printed as 'mhips'.
    """

    def __init__(self, prefix: str = "pathsmooth.") -> None:
        super().__init__()
        self.prefix = prefix

    def filter(self, record: logging.LogRecord) -> bool:
        if record.name.startswith(self.prefix):
            record.name = record.name[len(self.prefix):]
        return True


def get_logging_config():
    """Generate logging configuration with configurable log level."""
    # Valid values: DEBUG, INFO, WARNING, ERROR, CRITICAL
    log_level = os.environ.get("LOG_LEVEL", "INFO").upper()

    valid_levels = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}
    if log_level not in valid_levels:
        log_level = "INFO"

    return {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {
            "default": {
                "format": "%(levelname)-8s %(asctime)s - %(threadName)-14s - %(name)-11s - %(message)s",
            },
        },
        "handlers": {
            "default": {
                "class": "logging.StreamHandler",
                "formatter": "default",
                "stream": "ext://sys.stderr",
                "filters": ["short_name"],
            },
        },
        "filters": {
            "short_name": {
                "()": "pathsmooth.logging_config.ShortNameFilter",
                "prefix": "pathsmooth.",
            }
        },
        "loggers": {
            "pathsmooth": {"handlers": ["default"], "level": log_level, "propagate": False},
        },
        "root": {"handlers": ["default"], "level": "WARNING"},
    }


def configure_logging() -> None:
    """Configure logging for the library and the command line."""
    dictConfig(get_logging_config())
