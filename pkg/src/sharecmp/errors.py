"""Exception types shared across the package."""


class ShareCMPError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ShareCMPError, ValueError):
    """Array shapes, value ranges or channel counts do not satisfy a contract."""


class ConfigError(ShareCMPError, ValueError):
    """A configuration value is missing, unknown or out of range."""


class DatasetError(ShareCMPError):
    """A dataset index or one of its files cannot be resolved."""


class CheckpointError(ShareCMPError):
    """A checkpoint is missing, unreadable or incompatible with a config."""


class TrainingError(ShareCMPError, RuntimeError):
    """Training diverged (non-finite loss)."""
