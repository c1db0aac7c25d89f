"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so the command-line front
end never has to keep its own lookup table in sync.
"""

from __future__ import annotations


class CfrError(Exception):
    exit_code = 1


class ConfigError(CfrError, ValueError):
    """Invalid configuration or usage."""

    exit_code = 2


class GenerationStalledError(CfrError, RuntimeError):
    """Rejection sampling ran out of its candidate budget."""

    exit_code = 3


class DivergenceError(CfrError, FloatingPointError):
    """An optimizer produced non-finite values."""

    exit_code = 4


class DataError(CfrError, ValueError):
    """Malformed file or inconsistent data."""

    exit_code = 5


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.field = field


class DimensionError(DataError):
    """Array shapes do not line up."""


class SingularSystemError(CfrError, ArithmeticError):
    """A least-squares system is rank deficient."""

    exit_code = 5


class ConvergenceWarning(UserWarning):
    pass
