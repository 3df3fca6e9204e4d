"""Exception types shared across the package, with their CLI exit codes."""

from .tensor import NonFiniteError


class ConfigError(ValueError):
    """Invalid configuration or command-line arguments."""

    exit_code = 2


class DataError(ValueError):
    """Malformed dataset, out-of-vocabulary token, or empty split."""

    exit_code = 2


class CheckpointError(FileNotFoundError):
    """A checkpoint directory or one of its entries is missing or corrupt."""

    exit_code = 3


NonFiniteError.exit_code = 4

__all__ = ["ConfigError", "DataError", "CheckpointError", "NonFiniteError"]
