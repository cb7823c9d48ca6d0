"""Reverse-mode automatic differentiation over dense float tensors.

The design is a flat tape rather than a graph: every differentiable
operation appends one pull-back closure to the active :class:`Tape` in
forward execution order, which is already a topological order, so
:func:`backward` simply replays the list once in reverse.

Tensors are immutable after construction except for the ``grad`` slot,
which is only written during :func:`backward` (and by the optimizer
between steps). A tape must stay on one thread; read-only tensors may be
shared freely.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from ..errors import GutsegError, ShapeError


class Tensor:
    """N-dimensional float array with an optional gradient slot.

    ``data`` is kept C-contiguous (row-major). float32 is the working
    precision of the whole pipeline; float64 inputs are accepted so the
    gradient-check harness can re-run forwards in 64-bit.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype.name}{flag})"


class Tape:
    """Ordered record of the differentiable ops of one forward pass.

    Use as a context manager around forward + backward::

        with Tape():
            loss = ...
            backward(loss)

    Nodes are appended in forward order, so every node's inputs precede
    it and one reverse sweep propagates all gradients.
    """

    current: Optional["Tape"] = None

    def __init__(self):
        self.nodes: list[Callable[[], None]] = []
        self._outer: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        self._outer = Tape.current
        Tape.current = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        Tape.current = self._outer
        self._outer = None

    def __len__(self) -> int:
        return len(self.nodes)


def recording(out: Tensor) -> bool:
    """True when a pull-back should be captured for ``out``."""
    return out.requires_grad and Tape.current is not None


def record(out: Tensor, pull: Callable[[], None]) -> None:
    """Attach ``out`` to the active tape with its pull-back closure."""
    tape = Tape.current
    out.tape = tape
    tape.nodes.append(pull)


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad``; gradients from multiple uses sum."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise GutsegError(
            "loss was not recorded on a tape; run the forward pass inside "
            "`with Tape():` and make sure some input has requires_grad=True"
        )
    loss.grad = np.ones_like(loss.data)
    for pull in reversed(loss.tape.nodes):
        pull()
