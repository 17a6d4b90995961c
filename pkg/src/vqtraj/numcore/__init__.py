"""Numerical core: tensors, reverse-mode tape, Adam, seeded RNG, gradient checks."""
from .gradcheck import GradCheckReport, grad_check
from .ops import ShapeError
from .optim import Adam, AdamState
from .rng import Rng
from .tensor import Tape, Tensor, active_tape, backward, get_dtype, no_grad, precision

__all__ = [
    "Adam",
    "AdamState",
    "GradCheckReport",
    "Rng",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
    "get_dtype",
    "grad_check",
    "no_grad",
    "precision",
]
