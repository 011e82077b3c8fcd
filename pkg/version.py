"""
Version information for bliss.
"""

# Current version
VERSION = "0.3.0"
BUILD_DATE = "2026-10-17"

# First line of every checkpoint file
CHECKPOINT_FORMAT = "BLISS-CKPT"
CHECKPOINT_VERSION = "v1"


def get_version():
    """Get current version string."""
    return VERSION


def get_build_date():
    """Get build date string."""
    return BUILD_DATE


def checkpoint_header():
    """Header line written at the top of checkpoint files."""
    return f"{CHECKPOINT_FORMAT} {CHECKPOINT_VERSION}"
