"""
Logging setup for DepthProbe
JSON log lines on stderr, level from DEPTHPROBE_LOG
"""

import logging
import sys
from typing import Optional

from pythonjsonlogger import jsonlogger

from config import get_log_level

LEVELS = {
    'error': logging.ERROR,
    'info': logging.INFO,
    'debug': logging.DEBUG,
}

_HANDLER_NAME = 'depthprobe-json'


def configure_logging(level: Optional[str] = None) -> logging.Logger:
    """
    Install a single JSON stream handler on the root logger

    Calling it again only updates the level.
    """
    level_name = (level or get_log_level()).lower()
    root = logging.getLogger()
    root.setLevel(LEVELS.get(level_name, logging.INFO))

    if not any(getattr(h, 'name', None) == _HANDLER_NAME for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.set_name(_HANDLER_NAME)
        handler.setFormatter(jsonlogger.JsonFormatter('%(asctime)s %(levelname)s %(name)s %(message)s'))
        root.addHandler(handler)

    return root
