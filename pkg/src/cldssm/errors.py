"""Exception types raised across the package."""


class CLDSSMError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(CLDSSMError, ValueError):
    pass


class DimensionMismatch(CLDSSMError, ValueError):
    pass


class LengthMismatch(CLDSSMError, ValueError):
    pass


class NonFiniteLoss(CLDSSMError, FloatingPointError):
    def __init__(self, epoch, batch, value):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")


class ParseError(CLDSSMError, ValueError):
    def __init__(self, row, column, message=""):
        self.row = row
        self.column = column
        detail = f": {message}" if message else ""
        super().__init__(f"row {row}, column {column!r}{detail}")


class MissingColumn(CLDSSMError, KeyError):
    def __str__(self):
        return f"missing column {self.args[0]!r}"


class InsufficientData(CLDSSMError, ValueError):
    def __init__(self, required, available):
        self.required = required
        self.available = available
        super().__init__(f"need {required} samples, have {available}")


class IncompatibleCheckpoint(CLDSSMError, ValueError):
    pass
