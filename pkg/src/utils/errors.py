"""Custom exception classes for voxel-fm."""


class VoxfmException(Exception):
    """Base exception class for all voxel-fm errors."""

    pass


class ConfigurationError(VoxfmException):
    """Raised when configuration is invalid or missing."""

    pass


class VolumeStoreError(VoxfmException):
    """Raised when a volume cannot be stored or loaded."""

    pass


class VolumeFormatError(VolumeStoreError):
    """Raised when a volume container is malformed."""

    pass


class ManifestError(VoxfmException):
    """Raised when a dataset manifest violates its schema or split rules."""

    pass


class PreprocessError(VoxfmException):
    """Raised when a preprocessing step receives invalid input."""

    pass


class EncoderError(VoxfmException):
    """Raised on encoder shape mismatches or non-finite activations."""

    pass


class CheckpointError(VoxfmException):
    """Raised when a checkpoint cannot be written, read or applied."""

    pass


class TrainingError(VoxfmException):
    """Raised when a training step diverges or receives invalid state."""

    pass


class SamplingError(VoxfmException):
    """Raised when a sampler cannot satisfy its class quotas."""

    pass


class MetricError(VoxfmException):
    """Raised when a metric or statistic is undefined for its input."""

    pass


class RetrievalError(VoxfmException):
    """Raised on invalid embedding sets or retrieval queries."""

    pass


class InterpretError(VoxfmException):
    """Raised when attention interpretation receives invalid input."""

    pass


class ReportError(VoxfmException):
    """Raised when a report or JSON artifact cannot be written."""

    pass


class CLIError(VoxfmException):
    """Raised when CLI execution fails."""

    pass
