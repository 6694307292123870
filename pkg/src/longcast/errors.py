"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class LongcastError(Exception):
    exit_code = 1


class ConfigError(LongcastError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    """Tensor shapes do not fit the operation."""


class ContractError(LongcastError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""

    exit_code = 2


class DataError(LongcastError, ValueError):
    exit_code = 3


class CheckpointError(DataError):
    pass


class NumericError(LongcastError, ArithmeticError):
    exit_code = 4


class ResourceError(LongcastError, MemoryError):
    exit_code = 5
