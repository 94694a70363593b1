"""Exception types shared across the package."""


class IOBError(Exception):
    """Base class for all package errors."""


class DimensionError(IOBError, ValueError):
    """Tensor shapes are incompatible with an operation or layer."""


class DomainError(IOBError, ValueError):
    """An argument lies outside its admissible range."""


class UsageError(IOBError, RuntimeError):
    """An API was called in a state that does not allow it."""


class FormatError(IOBError, ValueError):
    """A file on disk does not follow the expected binary layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(IOBError, ArithmeticError):
    """Training diverged or produced non-finite values."""
