"""Exception hierarchy shared by all modules."""


class DeepDescError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DeepDescError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class DegenerateInputError(DeepDescError, ValueError):
    """Input cannot be processed meaningfully (e.g. a zero-norm vector)."""


class DegenerateBatchError(DegenerateInputError):
    """A training or mining batch is too small or has too few labels."""


class NumericError(DeepDescError, ArithmeticError):
    """A non-finite value appeared where finite numbers are required."""


class FormatError(DeepDescError, ValueError):
    """A file does not follow the expected binary or text layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConstraintError(DeepDescError, ValueError):
    """Inputs violate a documented precondition."""


class BoundaryError(ConstraintError):
    """A patch window falls outside the image."""
