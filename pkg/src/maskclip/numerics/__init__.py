"""Array arithmetic with reverse-mode autodiff and a finite-difference oracle."""

from . import kernels, ops
from .gradcheck import NonSmoothError, finite_difference_check
from .ops import primitive_set, stop_gradient
from .tensor import (
    AxisError,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    finite_checks,
    grad_enabled,
    no_grad,
)

__all__ = [
    "AxisError",
    "NonFiniteError",
    "NonSmoothError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "finite_checks",
    "finite_difference_check",
    "grad_enabled",
    "kernels",
    "no_grad",
    "ops",
    "primitive_set",
    "stop_gradient",
]
