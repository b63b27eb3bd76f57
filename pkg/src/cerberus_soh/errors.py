"""Exception hierarchy.

The CLI maps these onto exit codes: ``DataError`` (and subclasses) -> 2,
``NumericError`` (and subclasses) -> 3.
"""


class CerberusError(Exception):
    """Base class for every error raised by this package."""


class DataError(CerberusError, ValueError):
    """Input data violates a documented invariant."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class SchemaError(DataError):
    pass


class MissingStepError(DataError):
    pass


class ResamplingError(DataError):
    pass


class DegenerateDataError(DataError):
    pass


class StratificationError(DataError):
    pass


class MetricError(DataError):
    pass


class InputError(DataError):
    pass


class SpecError(DataError):
    pass


class ShapeError(DataError):
    """Array/sequence dimensions do not match what an operation expects."""


class CheckpointError(DataError):
    pass


class NumericError(CerberusError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    def __init__(self, message: str, epoch: int | None = None):
        self.epoch = epoch
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)


class UsageError(CerberusError):
    pass
