"""Exception hierarchy shared by every module.

The CLI maps ``ConfigError`` to exit code 2 and ``DataError`` to exit code 1.
"""


class FuseSerError(Exception):
    """Base class for all package errors."""


class ConfigError(FuseSerError, ValueError):
    """Invalid configuration, shapes or hyperparameters."""


class DataError(FuseSerError, ValueError):
    """Bad data encountered at runtime (labels, indices, missing branches)."""


class IngestionError(DataError):
    """Malformed or missing file on disk."""


class NonFiniteError(DataError):
    """A loss, gradient or forward value became NaN or infinite."""
