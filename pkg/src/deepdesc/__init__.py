"""Learned local-feature descriptors with hardest-in-batch triplet training."""
from .errors import (BoundaryError, ConstraintError, DeepDescError, DegenerateBatchError,
                     DegenerateInputError, DimensionError, FormatError, NumericError)

__version__ = "0.1.0"

__all__ = [
    "BoundaryError", "ConstraintError", "DeepDescError", "DegenerateBatchError",
    "DegenerateInputError", "DimensionError", "FormatError", "NumericError",
]
