"""Exception hierarchy shared by every stage of the pipeline.

The CLI maps these onto process exit codes, so library code raises them
instead of returning status values.
"""


class PPGKDError(Exception):
    exit_code = 1


class ConfigError(PPGKDError, ValueError):
    """Invalid argument, inconsistent toggles or a missing prerequisite."""

    exit_code = 2


class ShapeError(ConfigError):
    pass


class DataError(PPGKDError, ValueError):
    """Malformed or unusable input data."""

    exit_code = 3


class InsufficientDataError(DataError):
    pass


class LoadError(DataError):
    pass


class NumericalError(PPGKDError, ArithmeticError):
    """A non-finite value appeared in a loss or gradient."""

    exit_code = 4
