"""Tensors and the define-by-run tape used for reverse-mode differentiation."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray, tuple[bool, ...]], tuple["np.ndarray | None", ...]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An n-dimensional array that can take part in a recorded computation.

    Leaf tensors created with ``requires_grad=True`` are the parameters whose
    gradients :func:`backward` reports. Tensors produced by an op inherit
    ``requires_grad`` from their inputs and carry a ``node_id`` pointing into
    the tape that recorded them.
    """

    __slots__ = ("data", "requires_grad", "node_id", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        from .ops import add

        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .ops import add, scale

        return add(self, scale(as_tensor(other), -1.0))

    def __neg__(self):
        from .ops import scale

        return scale(self, -1.0)

    def __mul__(self, factor):
        from .ops import scale

        if isinstance(factor, Tensor):
            raise TypeError("only scalar factors are supported")
        return scale(self, float(factor))

    __rmul__ = __mul__


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as ops execute, so parents always precede children.
    Use as a context manager; ops executed inside the ``with`` block are
    recorded when at least one input requires a gradient.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: BackwardFn) -> None:
        out.node_id = len(self.nodes)
        self.nodes.append(Node(out, tuple(parents), backward))


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap an op's output, recording it on the active tape when needed."""
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(out, parents, backward)
    return out


def backward(
    loss: Tensor, tape: Tape, params: Iterable[Tensor] | None = None
) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss`` over ``tape``.

    Returns a mapping from leaf tensor to its gradient. When ``params`` is
    given the mapping covers exactly those tensors, with zero gradients for
    any that did not influence the loss. Each returned gradient is also
    stored on ``tensor.grad``.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.node_id is None or loss.node_id >= len(tape.nodes) or tape.nodes[loss.node_id].out is not loss:
        raise ValueError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        needs = tuple(p.requires_grad for p in node.parents)
        parent_grads = node.backward(g, needs)
        for parent, pg, need in zip(node.parents, parent_grads, needs):
            if not need or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent.node_id is None:
                leaves[key] = parent

    result: dict[Tensor, np.ndarray] = {}
    if params is None:
        for key, leaf in leaves.items():
            result[leaf] = grads[key]
    else:
        for p in params:
            result[p] = grads.get(id(p), np.zeros_like(p.data))
    for leaf, g in result.items():
        leaf.grad = g
    return result
