"""Exception hierarchy. The CLI maps each family onto an exit code."""


class EmbforgeError(Exception):
    exit_code = 2


class ConfigError(EmbforgeError, ValueError):
    exit_code = 1


class InputError(EmbforgeError, ValueError):
    exit_code = 2


class DataError(EmbforgeError, ValueError):
    exit_code = 2


class BatchingError(DataError):
    pass


class DimensionError(EmbforgeError, ValueError):
    exit_code = 2


class DomainError(EmbforgeError, ArithmeticError):
    exit_code = 3


class NumericError(EmbforgeError, ArithmeticError):
    exit_code = 3
