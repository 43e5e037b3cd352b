"""Exception types raised across the package."""


class BacounError(Exception):
    """Base class for package errors."""


class ShapeError(BacounError, ValueError):
    """Array dimensions do not line up."""


class StateError(BacounError, RuntimeError):
    """An object is used before it is ready (e.g. empty posterior, untrained flow)."""


class NumericalError(BacounError, ArithmeticError):
    """A computation produced non-finite values."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ConfigError(BacounError, ValueError):
    """Invalid or unknown configuration entries."""


class ParseError(BacounError, ValueError):
    """Malformed input file; ``line`` is 1-based and counts the header."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SchemaError(BacounError, ValueError):
    """Input file lacks a required column or field."""
