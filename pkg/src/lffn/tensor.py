"""Dense tensors and a reverse-mode tape.

A :class:`Tensor` is a thin wrapper over a numpy array (NCHW for feature
maps).  Operations in :mod:`lffn.ops` record themselves on the innermost
active :class:`Tape`; :func:`backward` walks that tape in reverse and
returns one gradient array per leaf tensor that requires grad.

    with Tape() as tape:
        y = ops.conv2d(x, w, b, spec)
        loss = ops.l1_loss(y, target)
    grads = backward(loss, tape)
    grads[w]  # ndarray shaped like w
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes or channel counts do not agree."""


class NonFiniteError(FloatingPointError):
    """Raised when an op would produce (or receives) NaN or Inf."""


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{where}: non-finite values")
    return arr


class Tensor:
    """N-d float array with an optional gradient requirement.

    Feature maps are (n, c, h, w); weights and per-sample vectors use
    whatever rank the owning op expects.  Leaf tensors are validated as
    finite on construction.
    """

    __slots__ = ("data", "requires_grad", "name", "_produced", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        check_finite(self.data, name or "Tensor")
        self.requires_grad = requires_grad
        self.name = name
        self._produced = False

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.name = None
        t._produced = requires_grad
        return t

    @classmethod
    def zeros(cls, shape, requires_grad=False, name=None, dtype=DEFAULT_DTYPE):
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, name=name)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._produced

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), name=self.name)

    def __add__(self, other: "Tensor") -> "Tensor":
        from lffn import ops
        return ops.add(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


VJP = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _Node:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, op: str, out: Tensor, inputs: tuple, vjp: VJP):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable ops executed while active.

    Use as a context manager.  Nodes are appended in execution order and
    a tape can be consumed by :func:`backward` exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, out: Tensor, inputs: tuple, vjp: VJP) -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed; run the forward pass again")
        self.nodes.append(_Node(op, out, inputs, vjp))


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Wrap an op result and, if anything upstream needs grad, record it."""
    check_finite(data, op)
    needs = any(t.requires_grad for t in inputs)
    tape = active_tape()
    out = Tensor._from_op(data, needs and tape is not None)
    if out.requires_grad:
        tape.record(op, out, tuple(inputs), vjp)
    return out


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Reverse-mode pass from a scalar ``loss`` over ``tape``.

    Returns a dict keyed by leaf tensors (identity) with one accumulated
    gradient array each.  The tape's saved activations are released.
    """
    if tape.consumed:
        raise RuntimeError("tape already consumed; run the forward pass again")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp.is_leaf:
                leaves[key] = inp
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    tape.nodes.clear()
    if not leaves and loss.is_leaf and loss.requires_grad:
        leaves[id(loss)] = loss
    return {t: check_finite(grads[k].astype(t.dtype, copy=False), "backward") for k, t in leaves.items()}
