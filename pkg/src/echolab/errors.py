"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes: configuration problems exit with
2, data problems with 3, numerical failures with 4.
"""


class EchoLabError(Exception):
    exit_code = 1


class ConfigError(EchoLabError, ValueError):
    exit_code = 2


class DataError(EchoLabError, ValueError):
    exit_code = 3


class ShapeError(DataError):
    """Array shape does not match what a layer or routine expects."""


class NumericError(EchoLabError, ArithmeticError):
    exit_code = 4
