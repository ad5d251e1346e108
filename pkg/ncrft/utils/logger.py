import logging
import os
from logging.handlers import RotatingFileHandler
import sys
from typing import Dict, Optional


def setup_logger(name: str = "ncrft") -> logging.Logger:
    """
    Set up a logger with console and rotating file handlers

    Args:
        name: Logger name

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)

    # Avoid duplicate handlers
    if logger.handlers:
        return logger

    log_level = os.getenv("LOG_LEVEL", "INFO").upper()
    logger.setLevel(getattr(logging, log_level, logging.INFO))

    detailed_formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'
    )

    simple_formatter = logging.Formatter(
        '%(asctime)s - %(levelname)s - %(message)s'
    )

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(logging.INFO)
    console_handler.setFormatter(simple_formatter)
    logger.addHandler(console_handler)

    # An empty LOG_FILE turns file logging off
    log_file = os.getenv("LOG_FILE", "ncrft.log")
    if log_file:
        file_handler = RotatingFileHandler(
            log_file,
            maxBytes=10*1024*1024,  # 10MB
            backupCount=5
        )
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(detailed_formatter)
        logger.addHandler(file_handler)

    return logger


def log_epoch(logger: logging.Logger, run: str, epoch: int, metrics: Dict[str, float]):
    """Log one training epoch as a single key=value line"""
    parts = " ".join(f"{key}={value:.6g}" for key, value in metrics.items())
    logger.info(f"EPOCH {run} #{epoch} {parts}")


def log_early_update(logger: logging.Logger, position: Optional[int], length: int):
    """Log where the gold prefix left the beam"""
    if position is None:
        logger.debug(f"Gold path survived the beam ({length} positions)")
    else:
        logger.debug(f"Early update at position {position}/{length}")


def log_error(logger: logging.Logger, error: Exception, context: str = ""):
    """Log error with context"""
    context_info = f" [{context}]" if context else ""

    logger.error(f"Error{context_info}: {str(error)}", exc_info=True)


# Global logger instance
app_logger = setup_logger("ncrft")
