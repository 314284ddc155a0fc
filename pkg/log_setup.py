"""
Logging Setup
Configures the loguru sinks from environment settings
"""

import os
import sys
from typing import Optional

from loguru import logger

_configured = False


def configure_logging(level: Optional[str] = None, log_file: Optional[str] = None, force: bool = False):
    """
    Install the stderr sink (and optionally a file sink)

    Args:
        level: log level, defaults to SPLAT_LOG_LEVEL or INFO
        log_file: optional path, defaults to SPLAT_LOG_FILE
        force: reconfigure even if already configured
    """
    global _configured
    if _configured and not force:
        return

    level = (level or os.getenv("SPLAT_LOG_LEVEL", "INFO")).upper()
    log_file = log_file or os.getenv("SPLAT_LOG_FILE")

    logger.remove()
    logger.add(
        sys.stderr,
        level=level,
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | {message}",
    )
    if log_file:
        logger.add(log_file, level=level, rotation="10 MB", enqueue=False)

    _configured = True
    logger.debug(f"Logging configured at {level}")
