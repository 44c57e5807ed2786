import logging
import os
import sys
from typing import Optional

_NOISY_LOGGERS = ("matplotlib", "PIL", "numba")


def setup_logger(level: Optional[int] = None, quiet: bool = False) -> logging.Logger:
    """Set up and configure the application logger.

    Args:
        level: Optional logging level (defaults to HSCRF_LOG_LEVEL, or DEBUG when
            HSCRF_DEBUG is true, or INFO)
        quiet: Force WARNING regardless of the other settings

    Returns:
        Configured root logger
    """
    if quiet:
        level = logging.WARNING
    elif level is None:
        level = _level_from_env()

    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )

    logger = logging.getLogger()

    for name in _NOISY_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)

    return logger


def _level_from_env() -> int:
    name = os.environ.get("HSCRF_LOG_LEVEL", "").upper()
    if name and isinstance(logging.getLevelName(name), int):
        return logging.getLevelName(name)
    if os.environ.get("HSCRF_DEBUG", "false").lower() == "true":
        return logging.DEBUG
    return logging.INFO


def get_logger(name: str) -> logging.Logger:
    """Get a logger for a specific module.

    Args:
        name: Name of the module (typically __name__)

    Returns:
        Logger instance for the module
    """
    return logging.getLogger(name)
