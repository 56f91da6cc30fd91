"""Tensor arithmetic with reverse-mode differentiation."""

from .gradcheck import GradCheckEntry, GradCheckReport, grad_check
from .tensor import Tape, Tensor, accumulate, active_tape
from . import ops

__all__ = [
    "GradCheckEntry",
    "GradCheckReport",
    "Tape",
    "Tensor",
    "accumulate",
    "active_tape",
    "grad_check",
    "ops",
]
