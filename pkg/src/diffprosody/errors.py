"""Exception types; the CLI maps each to an exit code."""


class ConfigError(ValueError):
    exit_code = 2


class DataError(ValueError):
    exit_code = 3


class DivergenceError(FloatingPointError):
    exit_code = 4
