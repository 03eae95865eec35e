"""
Exception hierarchy shared by services and commands.

Each family carries the process exit code the CLI returns for it.
"""


class GatingError(Exception):
    """Base class for every failure raised by the gating engine."""

    exit_code: int = 1


class ConfigError(GatingError, ValueError):
    """Invalid configuration, checkpoint/config mismatch or stage-order violation."""

    exit_code = 2


class DataError(GatingError, ValueError):
    """Input samples, annotations or traces violate a precondition."""

    exit_code = 3


class NumericalError(GatingError, RuntimeError):
    """A loss or gradient became NaN or infinite."""

    exit_code = 4


EXIT_OK = 0
