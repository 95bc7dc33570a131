"""Exception types shared across the package."""


class CSIDNError(Exception):
    """Base class for all package errors."""


class ShapeError(CSIDNError, ValueError):
    pass


class ValidationError(CSIDNError, ValueError):
    pass


class DomainError(CSIDNError, ValueError):
    pass


class NumericError(CSIDNError, FloatingPointError):
    pass


class DataError(CSIDNError, ValueError):
    pass


class SchemaError(CSIDNError, ValueError):
    pass


class ConfigError(CSIDNError, ValueError):
    """Invalid configuration. ``key`` carries the dotted path when known."""

    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class ParseError(CSIDNError, ValueError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)


class UnsupportedDimensionError(ShapeError):
    pass
