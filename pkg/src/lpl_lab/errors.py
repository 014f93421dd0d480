"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 1,
missing or unreadable inputs with 2 and numerical aborts with 3.
"""


class LplLabError(Exception):
    exit_code = 1


class ConfigError(LplLabError, ValueError):
    exit_code = 1


class MissingInputError(LplLabError, FileNotFoundError):
    exit_code = 2


class IngestionError(LplLabError):
    exit_code = 2


class IntegrityError(LplLabError):
    """Raised when a checkpoint container is corrupt or truncated."""

    exit_code = 2


class NumericalError(LplLabError, ArithmeticError):
    exit_code = 3
