class ProtoxferError(Exception):
    exit_code = 1


class ConfigError(ProtoxferError, ValueError):
    """Invalid configuration or tensor shape."""

    exit_code = 3


class DataError(ProtoxferError, ValueError):
    """Dataset contents do not satisfy an operation's preconditions."""

    exit_code = 4


class NumericError(ProtoxferError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    exit_code = 5
