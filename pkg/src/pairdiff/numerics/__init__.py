"""Minimal tensor algebra with reverse-mode autodiff and AdamW."""

from . import ops
from .optim import OptimizerState, adamw_step, clip_grad_norm
from .tensor import (
    AutodiffTape,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    get_tape,
    no_grad,
)

__all__ = [
    "AutodiffTape",
    "NonFiniteError",
    "OptimizerState",
    "ShapeError",
    "Tensor",
    "adamw_step",
    "backward",
    "clip_grad_norm",
    "get_tape",
    "no_grad",
    "ops",
]
