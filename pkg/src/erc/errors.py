class ErcError(Exception):
    """Base class for toolkit errors. ``exit_code`` is used by the CLI."""

    exit_code = 1


class ConfigError(ErcError):
    exit_code = 3


class DataError(ErcError):
    exit_code = 4


class NumericError(ErcError):
    exit_code = 5
