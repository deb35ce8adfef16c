#!/usr/bin/env python3
"""
Environment configuration and logging setup for the KPZ/EW laboratory.

Values come from the process environment, optionally pre-loaded from a
``.env`` file in the working directory.
"""

import os
import logging
from datetime import datetime

__version__ = "1.0.0"

# Try to load environment variables from .env file
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"⚠️ Invalid {name}={raw!r}, using default {default}")
        return default


def _env_flag(name: str, default: bool = False) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in ('1', 'true', 'yes', 'on')


LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()
LOG_DIR = os.getenv('KPZLAB_LOG_DIR', 'logs')
OUTPUT_DIR = os.getenv('KPZLAB_OUTPUT_DIR', 'results')
DEFAULT_SEED = _env_int('KPZLAB_SEED', 20180101)
WORKERS = max(1, _env_int('KPZLAB_WORKERS', 1))
RUN_SLOW = _env_flag('KPZLAB_RUN_SLOW')


def setup_logging(level: str = None, log_to_file: bool = True) -> logging.Logger:
    """
    Configure root logging once: console handler plus a dated file handler

    Parameters:
    - level: Logging level name; defaults to LOG_LEVEL from the environment
    - log_to_file: Also write logs/kpzlab_YYYYMMDD.log

    Returns:
    - The root logger
    """
    root = logging.getLogger()
    if getattr(root, '_kpzlab_configured', False):
        return root

    level_name = (level or LOG_LEVEL).upper()
    root.setLevel(getattr(logging, level_name, logging.INFO))

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(console_handler)

    if log_to_file:
        try:
            os.makedirs(LOG_DIR, exist_ok=True)
            file_handler = logging.FileHandler(
                os.path.join(LOG_DIR, f'kpzlab_{datetime.now().strftime("%Y%m%d")}.log')
            )
            file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
            root.addHandler(file_handler)
        except OSError as e:
            logger.warning(f"⚠️ File logging disabled: {e}")

    root._kpzlab_configured = True
    return root
