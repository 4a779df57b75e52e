"""Minimal reverse-mode automatic differentiation over numpy arrays."""
from . import ops
from .gradcheck import analytic_grads, grad_check
from .tensor import Tape, Tensor, active_tape, as_tensor

__all__ = ["Tape", "Tensor", "active_tape", "as_tensor", "ops", "grad_check", "analytic_grads"]
