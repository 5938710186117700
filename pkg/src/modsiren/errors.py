"""Exception types shared across the package.

The CLI maps each family to a fixed exit code, so library code should raise
one of these rather than a bare ``ValueError``.
"""


class ModsirenError(Exception):
    exit_code = 1


class ConfigError(ModsirenError, ValueError):
    """Invalid hyperparameter or model configuration."""

    exit_code = 2


class UsageError(ModsirenError, ValueError):
    """Arguments with inconsistent shapes, out-of-range indices, etc."""

    exit_code = 2


class DataFormatError(ModsirenError):
    """Malformed or inconsistent file contents."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(ModsirenError, ArithmeticError):
    """Non-finite values appeared during optimization."""

    exit_code = 4

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
