"""Exception types.

The CLI maps these onto its exit codes: configuration problems exit 2,
bad input data exits 3, numeric failures exit 4.
"""


class NetReduceError(Exception):
    exit_code = 1


class ConfigError(NetReduceError):
    """Inconsistent or invalid configuration (exit code 2)."""

    exit_code = 2


class ParameterError(ConfigError, ValueError):
    """A scalar parameter is outside its valid range."""


class ShapeError(ConfigError, ValueError):
    """Array shapes do not agree."""


class ContractError(ConfigError):
    """A documented precondition was violated by the caller."""


class DataError(NetReduceError, ValueError):
    """Input data is malformed (exit code 3)."""

    exit_code = 3


class FormatError(DataError):
    """A file could not be parsed. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(DataError):
    """A file parsed but its contents are inconsistent."""


class NumericError(NetReduceError, ArithmeticError):
    """Non-finite values or a kernel that failed to converge (exit code 4)."""

    exit_code = 4


class TrainingDivergedError(NumericError):
    def __init__(self, epoch: int, batch: int | None, value: float):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: loss = {value}")
        self.epoch = epoch
        self.batch = batch
