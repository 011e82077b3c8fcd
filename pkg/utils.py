"""
Helper functions for bliss.
Provides logging setup, the exception hierarchy, seeding and file helpers.
"""
import os
import re
import hashlib
import logging
from pathlib import Path
from logging.handlers import RotatingFileHandler

import numpy as np


class BlissError(Exception):
    """Base class for every error raised by bliss."""


class ConfigError(BlissError, ValueError):
    """Invalid configuration value, spec or config-file line."""


class DimensionError(BlissError, ValueError):
    """Tensor shape mismatch or a sequence longer than the model allows."""


class TokenIndexError(BlissError, IndexError):
    """Token id or class label outside its valid range."""


class UsageError(BlissError, ValueError):
    """An operation was called in a way its contract forbids."""


class CorpusParseError(BlissError, ValueError):
    """Malformed line in a corpus, vocabulary or perturbed-dataset file."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class DivergenceError(BlissError, RuntimeError):
    """A loss component or gradient became NaN or infinite."""


class CheckpointError(BlissError, ValueError):
    """Checkpoint file with a bad header, version or payload."""


LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(log_path=None, level=logging.INFO, console=True):
    """
    Set up logging with rotation.

    Args:
        log_path (str | Path | None): Log file; defaults to bliss.log in the
            current directory
        level (int): Root logger level
        console (bool): Also log to stderr

    Returns:
        logging.Logger: The configured root logger
    """
    if log_path is None:
        log_path = Path.cwd() / "bliss.log"
    log_path = Path(log_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)

    logger = logging.getLogger()
    logger.setLevel(level)

    # Drop handlers from an earlier call so repeated dispatches don't duplicate output
    for handler in list(logger.handlers):
        if getattr(handler, "_bliss_handler", False):
            logger.removeHandler(handler)
            handler.close()

    formatter = logging.Formatter(LOG_FORMAT)

    # Create rotating file handler (1MB max, keep 3 backups)
    file_handler = RotatingFileHandler(
        log_path, maxBytes=1_000_000, backupCount=3, encoding="utf-8"
    )
    file_handler.setLevel(level)
    file_handler.setFormatter(formatter)
    file_handler._bliss_handler = True
    logger.addHandler(file_handler)

    if console:
        stream_handler = logging.StreamHandler()
        stream_handler.setLevel(level)
        stream_handler.setFormatter(formatter)
        stream_handler._bliss_handler = True
        logger.addHandler(stream_handler)

    return logger


def derive_seed(seed, *purpose):
    """
    Derive a stable 64-bit seed from a base seed and a purpose.

    Args:
        seed (int): Base seed
        *purpose: Strings or integers naming the stream (e.g. "augment", epoch, index)

    Returns:
        int: Seed that is identical across runs and platforms
    """
    key = repr((int(seed),) + tuple(purpose)).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed, *purpose):
    """Random generator for one named stream derived from `seed`."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *purpose)))


def sanitize_filename(filename):
    """
    Clean up a run name so it can be used as a file or folder name.

    Args:
        filename (str): Original name, e.g. an ablation variant like "-aug-smooth"

    Returns:
        str: Sanitized filename
    """
    # Remove invalid characters
    sanitized = re.sub(r'[\\/*?:"<>|\s]', "_", filename)

    # Leading dashes make the name look like a CLI flag
    sanitized = sanitized.strip().strip(".").lstrip("-")

    # If empty after sanitization, use a default name
    if not sanitized:
        sanitized = "untitled"

    return sanitized


def check_file_access(filepath):
    """
    Check if a file can be accessed for reading.

    Args:
        filepath (str | Path): Path to file

    Returns:
        tuple: (bool success, str error_message)
    """
    path = Path(filepath)

    if not path.exists():
        return False, "File not found"

    if not path.is_file():
        return False, "Not a file"

    try:
        # Try opening for reading
        with open(path, 'rb'):
            pass
        return True, ""
    except PermissionError:
        return False, "Permission denied"
    except IOError:
        return False, "I/O error (file may be locked)"


def require_readable(filepath):
    """Raise FileNotFoundError/PermissionError style OSError if `filepath` can't be read."""
    can_access, error_msg = check_file_access(filepath)
    if not can_access:
        raise OSError(f"Cannot access {filepath}: {error_msg}")
    return Path(filepath)


def atomic_write_bytes(path, payload):
    """
    Write `payload` to `path` via a temporary file and os.replace.

    A crash mid-write leaves the previous file (if any) untouched.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as f:
        f.write(payload)
    os.replace(tmp_path, path)
    return path


def atomic_write_text(path, text):
    """Text variant of atomic_write_bytes (UTF-8, '\\n' newlines)."""
    return atomic_write_bytes(path, text.encode("utf-8"))
