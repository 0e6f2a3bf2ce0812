"""Exception types shared across the package.

Each class carries the process exit code the CLI maps it to.
"""


class OptFSError(Exception):
    exit_code = 1


class ConfigError(OptFSError, ValueError):
    exit_code = 2


class DataError(OptFSError, ValueError):
    exit_code = 3


class HashMismatchError(DataError):
    """Vocabulary, mask or snapshot fingerprints disagree."""


class UndefinedMetricError(DataError):
    """A metric is undefined on the given input (e.g. AUC over one class)."""


class NumericError(OptFSError, ArithmeticError):
    exit_code = 4


class ShapeError(OptFSError, ValueError):
    """Operand shapes are incompatible for a primitive."""

    exit_code = 2
