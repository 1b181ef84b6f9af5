"""Adam with bias correction and weight decay folded into the gradient."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.eps <= 0.0:
            raise ValueError("Adam eps must be positive")
        if self.weight_decay < 0.0:
            raise ValueError("weight decay must be non-negative")


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              hyper: AdamHyper) -> tuple[Sequence[Tensor], AdamState]:
    """Apply one Adam update in place and return ``(params, state)``.

    ``weight_decay * theta`` is added to each gradient before the moment
    updates (L2-style decay, as in ``torch.optim.Adam``).
    """
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise ShapeError("params, grads and Adam state must have equal length")
    state.step_count += 1
    t = state.step_count
    b1, b2 = hyper.beta1, hyper.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"Adam: shape mismatch for parameter {p.name or ''} {p.shape}")
        if hyper.weight_decay:
            g = g + hyper.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / bc2) + hyper.eps
        p.data -= ((hyper.learning_rate / bc1) * m / denom).astype(p.dtype, copy=False)
    return params, state
