#!/usr/bin/env python3
"""
Logging Configuration Module

Provides centralized logging configuration for the affordance engine.
All components log through named loggers that share one format and write
to stderr, which keeps stdout free for JSONL output.

Log Format:
    YYYY-MM-DD HH:MM:SS,mmm | LEVEL   | module_name | message

Example:
    2026-10-19 10:30:45,123 | INFO    | trainer | Step 100/2000 mean reward 5.812
    2026-10-19 10:30:46,456 | WARNING | reward_engine | Unknown token 'hold'

Usage:
    from src.logger_setup import get_logger
    logger = get_logger("my_module", "DEBUG")
    logger.info("This is an info message")
"""

import logging
import sys

LOG_FORMAT = "%(asctime)s | %(levelname)-7s | %(name)s | %(message)s"

_created = set()


def get_logger(name=__name__, level="INFO"):
    level = getattr(logging, str(level).upper(), logging.INFO)
    logger = logging.getLogger(name)
    if logger.handlers:
        return logger
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(handler)
    logger.setLevel(level)
    logger.propagate = False
    _created.add(name)
    return logger


def set_level(level: str) -> None:
    """Change the level of every logger created through get_logger."""
    value = getattr(logging, str(level).upper(), logging.INFO)
    for name in _created:
        logging.getLogger(name).setLevel(value)
