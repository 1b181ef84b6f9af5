"""A small define-by-run reverse-mode autodiff engine on numpy arrays."""

from .ops import (
    RunningStats,
    add,
    batchnorm2d,
    conv2d,
    conv_transpose2d,
    gram,
    mse,
    relu,
    scale,
    sum_all,
)
from .optim import AdamHyper, AdamState, adam_step
from .tensor import ShapeError, Tape, Tensor, active_tape, as_tensor, backward

__all__ = [
    "AdamHyper",
    "AdamState",
    "RunningStats",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "batchnorm2d",
    "conv2d",
    "conv_transpose2d",
    "gram",
    "mse",
    "relu",
    "scale",
    "sum_all",
]
