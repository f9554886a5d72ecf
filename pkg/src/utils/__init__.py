"""Utility modules for voxel-fm."""

from src.utils.constants import LOG_LEVELS, PROFILES, SPLITS
from src.utils.errors import (
    CLIError,
    ConfigurationError,
    ManifestError,
    MetricError,
    VoxfmException,
)

__all__ = [
    "LOG_LEVELS",
    "PROFILES",
    "SPLITS",
    "VoxfmException",
    "ConfigurationError",
    "ManifestError",
    "MetricError",
    "CLIError",
]
