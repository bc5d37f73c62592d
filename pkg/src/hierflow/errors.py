"""Exception hierarchy. The CLI maps each family onto an exit status."""


class HierflowError(Exception):
    exit_code = 1


class ConfigError(HierflowError, ValueError):
    """Bad flags or configuration keys."""

    exit_code = 2


class HierarchyError(HierflowError, ValueError):
    """Malformed hierarchy edges (cycles, multiple roots, ...)."""

    exit_code = 3


class DataError(HierflowError, ValueError):
    """Input data that cannot be used: shape mismatches, missing cells, irregular grids."""

    exit_code = 3


class NumericError(HierflowError, ArithmeticError):
    """Non-finite values, singular matrices, diverging training."""

    exit_code = 4
