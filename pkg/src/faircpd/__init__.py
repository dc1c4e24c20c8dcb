"""Fairness-regularized CP and matrix factorization with kernel independence penalties."""

from .bcd import RegularizerSpec, TrainConfig, fit
from .errors import (DegenerateInputError, DimensionError, DivergenceError, FormatError,
                     InvalidModeError, ResourceError, UndefinedAlignmentError)
from .tensor import FactorModel, reconstruct, relative_residual

__all__ = [
    "FactorModel", "RegularizerSpec", "TrainConfig", "fit", "reconstruct", "relative_residual",
    "DegenerateInputError", "DimensionError", "DivergenceError", "FormatError", "InvalidModeError",
    "ResourceError", "UndefinedAlignmentError",
]
