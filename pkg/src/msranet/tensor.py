"""Dense tensors and reverse-mode automatic differentiation.

A :class:`Tensor` wraps an immutable numpy array. Operations executed while a
:class:`GradTape` is active (``with GradTape() as tape:``) are recorded on it,
and :func:`backward` replays the record in reverse to produce gradients.
Outside a tape, operations just compute values.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from math import prod
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError, ShapeError, StateError

_local = threading.local()

# op name -> gradient multiplier; lets the gradient checker prove it catches errors
_FAULTS: dict[str, float] = {}


def _default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextmanager
def precision(dtype):
    """Set the default real type (``"float32"`` or ``"float64"``) for new tensors."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}")
    prev = _default_dtype()
    _local.dtype = dtype
    try:
        yield
    finally:
        _local.dtype = prev


@contextmanager
def branch_log():
    """Collect the branch masks of piecewise ops (ReLU, clamps) evaluated in this block."""
    prev = getattr(_local, "branches", None)
    log: list[bytes] = []
    _local.branches = log
    try:
        yield log
    finally:
        _local.branches = prev


def note_branches(mask: np.ndarray) -> None:
    log = getattr(_local, "branches", None)
    if log is not None:
        log.append(np.packbits(np.asarray(mask, dtype=bool)).tobytes())


def _tape_stack() -> list["GradTape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable dense array, row-major, with an optional autodiff history."""

    __slots__ = ("data", "requires_grad", "_tape", "__weakref__")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(_default_dtype())
        data.flags.writeable = False
        self.data = data
        self.requires_grad = bool(requires_grad)
        self._tape: GradTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def values(self) -> np.ndarray:
        """Flat row-major copy of the elements."""
        return self.data.ravel().copy()

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full((1,), x, dtype=dtype))


def new_tensor(shape: Sequence[int], values, requires_grad: bool = False, dtype=None) -> Tensor:
    """Build a tensor from a shape and a flat row-major value sequence."""
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"every extent must be >= 1, got {list(shape)}")
    arr = np.asarray(values, dtype=dtype or _default_dtype()).ravel()
    if arr.size != prod(shape):
        raise ShapeError(f"{arr.size} values do not fill shape {list(shape)}")
    if not np.isfinite(arr).all():
        raise DataError("tensor values must be finite")
    return Tensor(arr.reshape(shape).copy(), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype or _default_dtype()), requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=dtype or _default_dtype()), requires_grad)


# --------------------------------------------------------------------------- tape


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Ordered record of differentiable operations; one backward pass per tape."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._watched: list[Tensor] = []
        self._consumed = False

    def __enter__(self) -> "GradTape":
        if self._consumed:
            raise StateError("tape already consumed")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self._nodes]

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._watched.append(t)

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
        return backward(loss, self, wrt)


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out`` as a tensor and, under an active tape, log how to differentiate it.

    ``backward_fn`` maps the upstream gradient array to one gradient array (or
    ``None``) per input.
    """
    if not np.isfinite(out).all():
        raise DataError(f"{op} produced non-finite values")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        if op in _FAULTS:
            factor = _FAULTS[op]
            inner = backward_fn

            def backward_fn(g, _inner=inner, _f=factor):
                return [None if r is None else r * _f for r in _inner(g)]

        result._tape = tape
        tape._nodes.append(_Node(op, tuple(inputs), result, backward_fn))
    return result


def backward(loss: Tensor, tape: GradTape, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Gradients of a scalar ``loss`` recorded on ``tape``.

    With ``wrt`` the result holds exactly those tensors (leaves or
    intermediates), zero-filled where the loss does not depend on them.
    Otherwise it holds every requires-grad leaf the tape saw plus any watched
    tensors.
    """
    if tape._consumed:
        raise StateError("tape already consumed")
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {list(loss.shape)}")
    if loss.requires_grad and loss._tape is not tape:
        raise ContractError("loss was not produced on this tape")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape._nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                seen[key] = inp

    if wrt is None:
        targets: list[Tensor] = []
        ids: set[int] = set()
        for node in tape._nodes:
            for inp in node.inputs:
                if inp.requires_grad and inp._tape is None and id(inp) not in ids:
                    ids.add(id(inp))
                    targets.append(inp)
        for t in tape._watched:
            if id(t) not in ids:
                ids.add(id(t))
                targets.append(t)
    else:
        targets = list(wrt)

    out: dict[Tensor, Tensor] = {}
    for t in targets:
        g = grads.get(id(t))
        out[t] = Tensor(np.zeros(t.shape, dtype=t.dtype) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape))
    return out


# --------------------------------------------------------------------------- broadcasting


def _broadcast_axes(big: tuple[int, ...], small: tuple[int, ...]) -> tuple[int, ...] | None:
    """Axes of ``big`` that ``small`` is summed over, or ``None`` if not a channel broadcast.

    Accepted: equal shapes, ``[C]`` against ``[..., C]``, or same rank with
    every non-channel extent equal to 1 (a leading batch extent may match).
    """
    if big == small:
        return ()
    if not small or small[-1] != big[-1]:
        return None
    if len(small) == 1:
        return tuple(range(len(big) - 1))
    if len(small) != len(big):
        return None
    axes = []
    for i, (b, s) in enumerate(zip(big[:-1], small[:-1])):
        if s == 1:
            if b != 1:
                axes.append(i)
        elif not (i == 0 and s == b):
            return None
    return tuple(axes)


def _unbroadcast(g: np.ndarray, axes: tuple[int, ...], shape: tuple[int, ...]) -> np.ndarray:
    if not axes:
        return g.reshape(shape)
    return g.sum(axis=axes).reshape(shape)


def _pair(a: Tensor, b: Tensor, op: str):
    """Return (big, small, swapped, axes) for a channel-broadcast binary op."""
    axes = _broadcast_axes(a.shape, b.shape)
    if axes is not None:
        return a, b, False, axes
    axes = _broadcast_axes(b.shape, a.shape)
    if axes is not None:
        return b, a, True, axes
    raise ShapeError(f"{op}: incompatible shapes {list(a.shape)} and {list(b.shape)}")


# --------------------------------------------------------------------------- ops


def add(a: Tensor, b: Tensor) -> Tensor:
    big, small, swapped, axes = _pair(a, b, "add")
    out = a.data + b.data

    def back(g):
        gb, gs = g, _unbroadcast(g, axes, small.shape)
        return (gs, gb) if swapped else (gb, gs)

    return record("add", out, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    big, small, swapped, axes = _pair(a, b, "sub")
    out = a.data - b.data

    def back(g):
        if swapped:
            return _unbroadcast(g, axes, a.shape), -g
        return g, -_unbroadcast(g, axes, b.shape)

    return record("sub", out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    big, small, swapped, axes = _pair(a, b, "mul")
    out = a.data * b.data

    def back(g):
        g_big = g * small.data
        g_small = _unbroadcast(g * big.data, axes, small.shape)
        return (g_small, g_big) if swapped else (g_big, g_small)

    return record("mul", out, (a, b), back)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    c = x.dtype.type(c)
    return record("scale", x.data * c, (x,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    out = a.data @ b.data
    return record("matmul", out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    kept = x.data.sum(axis=axes, keepdims=True).shape

    def back(g):
        return (np.broadcast_to(g.reshape(kept), x.shape).copy(),)

    return record("reduce_sum", np.asarray(out), (x,), back)


def reduce_mean(x: Tensor, over=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over the ``over`` axes (all axes by default)."""
    axes = _norm_axes(over, x.ndim)
    count = prod(x.shape[a] for a in axes)
    out = x.data.mean(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else d for i, d in enumerate(x.shape))
    inv = x.dtype.type(1.0 / count)

    def back(g):
        return (np.broadcast_to(g.reshape(kept) * inv, x.shape).copy(),)

    return record("reduce_mean", np.asarray(out, dtype=x.dtype), (x,), back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def select(x: Tensor, index: tuple[int, ...]) -> Tensor:
    """Single element ``x[index]`` as a one-element tensor."""
    if len(index) != x.ndim or any(not 0 <= i < d for i, d in zip(index, x.shape)):
        raise ShapeError(f"index {index} out of range for shape {list(x.shape)}")
    out = x.data[index].reshape(1)

    def back(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[index] = g.reshape(())
        return (gx,)

    return record("select", out, (x,), back)
