"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to.
"""


class FloodTLError(Exception):
    exit_code = 1


class ConfigError(FloodTLError, ValueError):
    exit_code = 1


class DataError(FloodTLError, ValueError):
    exit_code = 2


class FormatError(DataError):
    pass


class RowError(DataError):
    def __init__(self, line: int, message: str = ""):
        self.line = line
        super().__init__(f"line {line}: {message}" if message else f"line {line}")


class LabelError(DataError):
    pass


class ShapeError(FloodTLError, ValueError):
    exit_code = 3


class NumericsError(FloodTLError, ArithmeticError):
    """Non-finite value produced or consumed by a numeric op.

    ``checkpoint`` is set by training loops to the last good state.
    """

    exit_code = 3

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
