"""Exception hierarchy shared by every module.

Each class carries an ``exit_code`` used by the command line front end.
"""


class ZSTCIError(Exception):
    exit_code = 1


class ConfigError(ZSTCIError, ValueError):
    exit_code = 2


class DimensionError(ZSTCIError, ValueError):
    exit_code = 3


class NumericError(ZSTCIError, ArithmeticError):
    exit_code = 3

    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"non-finite value produced by '{op}'")


class ProtocolError(ZSTCIError, RuntimeError):
    exit_code = 3


class DataError(ZSTCIError, ValueError):
    exit_code = 4


class FormatError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EstimationError(ZSTCIError, RuntimeError):
    exit_code = 3


class AggregationError(ZSTCIError, ValueError):
    exit_code = 4
