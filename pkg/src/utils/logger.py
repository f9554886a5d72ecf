"""Logging for voxel-fm: module loggers on stderr and line-delimited training logs."""

import json
import logging
import logging.handlers
import sys
from pathlib import Path
from typing import IO, Any, Dict, Optional, Union

from src.utils.constants import DEFAULT_LOG_LEVEL, LOG_LEVELS

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
LOG_FILE_BYTES = 10 * 1024 * 1024
LOG_FILE_BACKUPS = 7


def _check_level(log_level: str) -> int:
    if log_level not in LOG_LEVELS:
        raise ValueError(f"Invalid log level: {log_level}. Must be one of {LOG_LEVELS}")
    return getattr(logging, log_level)


def setup_logger(
    name: str,
    log_level: str = DEFAULT_LOG_LEVEL,
    log_dir: Optional[str] = None,
    console_output: bool = True,
) -> logging.Logger:
    """
    Set up a module logger.

    Console records go to stderr so verb reports on stdout stay parseable.

    Args:
        name: Logger name (typically __name__)
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR)
        log_dir: Directory for a rotating ``<name>.log`` file (none when None)
        console_output: Whether to log to stderr

    Returns:
        Configured logger instance

    Raises:
        ValueError: If log_level is invalid
    """
    level = _check_level(log_level)
    logger = logging.getLogger(name)
    logger.setLevel(level)
    if logger.handlers:
        return logger

    handlers = []
    if console_output:
        handlers.append(logging.StreamHandler(sys.stderr))
    if log_dir:
        log_path = Path(log_dir)
        log_path.mkdir(parents=True, exist_ok=True)
        handlers.append(
            logging.handlers.RotatingFileHandler(
                log_path / f"{name}.log", maxBytes=LOG_FILE_BYTES, backupCount=LOG_FILE_BACKUPS
            )
        )

    formatter = logging.Formatter(LOG_FORMAT, datefmt=LOG_DATE_FORMAT)
    for handler in handlers:
        handler.setLevel(level)
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    return logger


def set_package_level(log_level: str) -> None:
    """Apply a log level to every already-configured ``src.*`` logger."""
    level = _check_level(log_level)
    for name, existing in logging.Logger.manager.loggerDict.items():
        if name.startswith("src") and isinstance(existing, logging.Logger):
            existing.setLevel(level)
            for handler in existing.handlers:
                handler.setLevel(level)


class TrainingLog:
    """
    Line-delimited JSON log of optimisation steps.

    One object per step, written and flushed as it happens so a crashed run
    keeps every completed step.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.n_records = 0
        self._file: Optional[IO[str]] = None

    def __enter__(self) -> "TrainingLog":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w")
        return self

    def __exit__(self, *exc: Any) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def write(self, record: Dict[str, Any]) -> None:
        if self._file is None:
            raise RuntimeError(f"Training log {self.path} is not open")
        self._file.write(json.dumps(record, allow_nan=False) + "\n")
        self._file.flush()
        self.n_records += 1
