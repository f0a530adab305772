"""Exception types shared across the package."""


class DialstmError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(DialstmError):
    """Operand shapes are invalid for an operation."""


class NumericOverflowError(DialstmError):
    """An operation produced non-finite values."""


class GraphError(DialstmError):
    """The autodiff tape was used incorrectly."""


class ConfigError(DialstmError):
    """A configuration value or combination is invalid."""


class FormatError(DialstmError):
    """A serialized file does not match its declared format."""
