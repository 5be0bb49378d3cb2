"""Exception hierarchy shared across the package."""


class GelError(Exception):
    """Base class for all package errors."""


class DimensionError(GelError, ValueError):
    pass


class ArgumentError(GelError, ValueError):
    pass


class NumericError(GelError, ArithmeticError):
    pass


class ParseError(GelError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyGraphError(GelError, ValueError):
    pass


class CannotCorruptError(GelError, ValueError):
    pass


class SaturationError(GelError, RuntimeError):
    pass


class FormatError(GelError, ValueError):
    pass


class CompatibilityError(GelError, ValueError):
    pass


class ConfigError(GelError, ValueError):
    pass


class DataError(GelError, ValueError):
    pass


class UndefinedError(NumericError):
    """A statistic that has no value for the given input (e.g. correlation of a constant)."""
