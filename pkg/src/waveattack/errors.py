"""Exception hierarchy shared across the package.

Everything a caller can fix by changing inputs derives from ``ValidationError``
(a ``ValueError``); the CLI maps those to exit code 1.
"""


class ValidationError(ValueError):
    """Invalid argument values."""


class ShapeError(ValidationError):
    """Incompatible tensor shapes."""


class ConfigError(ValidationError):
    """Inconsistent experiment or attack configuration."""


class FormatError(ValidationError):
    """Malformed file contents."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class UsageError(RuntimeError):
    """API misuse, e.g. calling backward() on a non-scalar."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
