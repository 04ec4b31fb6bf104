"""Shared exception types.

The CLI maps these onto exit codes: ValidationError/ConfigError -> 2,
MissingDataError/FormatError -> 3, NumericError -> 4.
"""


class CrossdoseError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(CrossdoseError):
    """An argument or invariant check failed."""


class ConfigError(CrossdoseError):
    """Bad configuration file or command-line flags."""


class FormatError(CrossdoseError):
    """A raster, tensor, manifest or checkpoint file is malformed."""


class MissingDataError(CrossdoseError):
    """A required dataset or result artifact does not exist."""


class NumericError(CrossdoseError):
    """Non-finite values appeared where finite arithmetic was required."""
