"""A small reverse-mode autodiff engine over numpy arrays."""

from . import ops
from .ops import BatchNormState, ShapeError
from .optim import adam_step, zero_grad
from .tensor import NonFiniteError, Parameter, Tape, TapeError, Tensor

__all__ = [
    "ops", "BatchNormState", "ShapeError", "adam_step", "zero_grad",
    "NonFiniteError", "Parameter", "Tape", "TapeError", "Tensor",
]
