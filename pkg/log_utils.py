"""
log_utils.py — Run logging shared by every module.

Two logging modes:
1. Error logger: always appends warnings and errors to <log dir>/errors.log
2. Verbose logger: when FOKKERID_VERBOSE=1, logs progress to console + a numbered run_NNN.log

The log directory defaults to ./logs and can be moved with FOKKERID_LOG_DIR.
"""

from __future__ import annotations

import logging
import os
import threading
from datetime import datetime
from pathlib import Path

_verbose_logger: logging.Logger | None = None
_error_logger: logging.Logger | None = None
# ladder workers and Armijo threads log concurrently
_logger_lock = threading.Lock()


def _logs_dir() -> Path:
    logs_dir = Path(os.getenv("FOKKERID_LOG_DIR", "logs"))
    logs_dir.mkdir(parents=True, exist_ok=True)
    return logs_dir


def verbose_enabled() -> bool:
    return os.getenv("FOKKERID_VERBOSE", "").lower() in ("1", "true", "yes")


def _get_error_logger() -> logging.Logger:
    """Get or create the error logger (always enabled, logs to file only)."""
    global _error_logger

    if _error_logger is not None:
        return _error_logger
    with _logger_lock:
        if _error_logger is None:
            _error_logger = _build_error_logger()
        return _error_logger


def _build_error_logger() -> logging.Logger:
    logger = logging.getLogger("fokkerid_errors")
    logger.setLevel(logging.WARNING)
    logger.handlers.clear()
    logger.propagate = False

    file_handler = logging.FileHandler(_logs_dir() / "errors.log", encoding="utf-8")
    file_handler.setLevel(logging.WARNING)
    file_handler.setFormatter(logging.Formatter(
        "%(asctime)s [%(levelname)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    ))
    logger.addHandler(file_handler)
    return logger


def log_error(message: str, error: Exception | None = None) -> None:
    """Log an error message (always, regardless of verbose mode)."""
    logger = _get_error_logger()
    if error:
        logger.error(f"{message}: {error}", exc_info=False)
    else:
        logger.error(message)
    verbose_log(f"ERROR {message}" + (f": {error}" if error else ""))


def log_warning(message: str) -> None:
    """Log a recoverable problem (nonnegativity drift, stalled estimates, skipped runs)."""
    _get_error_logger().warning(message)
    verbose_log(f"WARNING {message}")


def _next_log_number(logs_dir: Path) -> int:
    numbers = []
    for log_file in logs_dir.glob("run_*.log"):
        try:
            numbers.append(int(log_file.stem.split("_")[1]))
        except (IndexError, ValueError):
            pass
    return max(numbers) + 1 if numbers else 1


def _get_verbose_logger() -> logging.Logger | None:
    """Get or create the verbose logger (only if FOKKERID_VERBOSE is enabled)."""
    global _verbose_logger

    if _verbose_logger is not None:
        return _verbose_logger
    if not verbose_enabled():
        return None
    with _logger_lock:
        if _verbose_logger is None:
            _verbose_logger = _build_verbose_logger()
        return _verbose_logger


def _build_verbose_logger() -> logging.Logger:
    logs_dir = _logs_dir()
    log_file = logs_dir / f"run_{_next_log_number(logs_dir):03d}.log"

    logger = logging.getLogger("fokkerid_verbose")
    logger.setLevel(logging.DEBUG)
    logger.handlers.clear()
    logger.propagate = False

    console_handler = logging.StreamHandler()
    console_handler.setLevel(logging.DEBUG)
    console_handler.setFormatter(logging.Formatter("[VERBOSE] %(message)s"))
    logger.addHandler(console_handler)

    file_handler = logging.FileHandler(log_file, encoding="utf-8")
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(message)s", datefmt="%H:%M:%S"))
    logger.addHandler(file_handler)

    logger.info(f"fokkerid verbose logging started - {datetime.now().isoformat()}")
    logger.info(f"Log file: {log_file}")
    return logger


def verbose_log(message: str) -> None:
    """Log a message if verbose mode is enabled (to both console and file)."""
    logger = _get_verbose_logger()
    if logger:
        logger.debug(message)


def reset_loggers() -> None:
    """Drop cached loggers so the next call re-reads the environment."""
    global _verbose_logger, _error_logger
    with _logger_lock:
        for logger in (_verbose_logger, _error_logger):
            if logger is not None:
                for handler in list(logger.handlers):
                    handler.close()
                    logger.removeHandler(handler)
        _verbose_logger = None
        _error_logger = None
