import logging
import os
import sys
from logging import Logger
from typing import Optional

from pythonjsonlogger import jsonlogger


def setup_logging(level: Optional[str] = None) -> Logger:
    """Configure JSON logging on stderr for the runner"""
    logger = logging.getLogger()
    log_level = (level or os.getenv("LOG_LEVEL", "INFO")).upper()
    logger.setLevel(log_level)

    # Remove existing handlers
    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    formatter = jsonlogger.JsonFormatter(
        "%(asctime)s %(levelname)s %(name)s %(message)s"
    )

    # stdout is reserved for the experiment summary
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    return logger
