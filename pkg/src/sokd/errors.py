"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NonFiniteError -> 4.
"""


class SokdError(Exception):
    """Base class for all package errors."""


class ShapeError(SokdError):
    """Operands violate a dimension or shape contract."""


class NonFiniteError(SokdError):
    """A tensor operation produced NaN or Inf."""


class ConfigError(SokdError):
    """Invalid or unknown configuration."""


class DataError(SokdError):
    """Unreadable or malformed data file."""


class BadMagicError(DataError):
    """Tensor container does not start with the expected magic bytes."""


class UnsupportedFormatError(DataError):
    """Tensor container version or dtype byte is not supported."""


class TruncatedPayloadError(DataError):
    """Tensor container payload is shorter than its header claims."""
