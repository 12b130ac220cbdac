"""Ordinal breast-cancer risk prediction from prior/current exam pairs, on a numpy autodiff core."""

from .errors import ConfigError, ValidationError
from .tensor import DimensionError, DomainError, NumericalError, TapeError, Tensor

__version__ = "0.1.0"

__all__ = ["ConfigError", "ValidationError", "DimensionError", "DomainError", "NumericalError",
           "TapeError", "Tensor", "__version__"]
