"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`MonoconError`, and
each subclass carries the CLI exit code it maps to.
"""


class MonoconError(Exception):
    exit_code = 1


class ConfigError(MonoconError, ValueError):
    """Invalid hyperparameter or argument combination."""

    exit_code = 2


class DimensionError(MonoconError, ValueError):
    """Operand shapes do not agree."""

    exit_code = 2


class FormatError(MonoconError):
    """Malformed, truncated or tampered file."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(MonoconError, ValueError):
    """Dataset violates its invariants (labels, non-finite values, sizes)."""

    exit_code = 3


class NumericalError(MonoconError, ArithmeticError):
    """Numerically degenerate input: log of non-positive, zero-norm rows, constant series."""

    exit_code = 4


class DomainError(NumericalError):
    pass


class DegenerateError(NumericalError):
    pass


class GraphError(MonoconError, RuntimeError):
    """Misuse of the autodiff tape (non-scalar root, repeated backward)."""
