"""Dense NumPy tensors with a tape-free reverse-mode autodiff graph.

Every differentiable op builds its output with :func:`_make`, attaching the
parent tensors and a closure that maps the output gradient to one gradient
per parent. :meth:`Tensor.backward` walks the graph in reverse topological
order and accumulates into ``.grad`` of every tensor that requires it.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return multiply(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable leaf or node."""
        if self.data.shape != (1, 1, 1, 1):
            raise ShapeError(f"backward() needs a (1,1,1,1) scalar loss, got shape {self.shape}")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is not None:
                node.grad += g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _tracks(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _tracks(p):
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(_tracks(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "subtract")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "multiply")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + float(c), (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def power(a: Tensor, p: float) -> Tensor:
    """``a ** p`` for non-negative ``a``; gradient at 0 is taken as 0 when p < 1."""
    p = float(p)
    x = a.data
    y = np.power(x, p)

    def back(g):
        if p == 1.0:
            return (g,)
        safe = np.where(x > 0, x, 1.0)
        return (g * np.where(x > 0, p * np.power(safe, p - 1.0), 0.0),)

    return _make(y, (a,), back)


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(), dtype=a.dtype).reshape(1, 1, 1, 1)
    return _make(out, (a,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    out = np.asarray(a.data.mean(), dtype=a.dtype).reshape(1, 1, 1, 1)
    return _make(out, (a,), lambda g: (np.full(shape, g.reshape(()) / n, dtype=g.dtype),))


def take(a: Tensor, index) -> Tensor:
    """Basic (slice) indexing; gradient scatters back into the source shape."""
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] += g
        return (full,)

    return _make(a.data[index].copy(), (a,), back)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_channels: no inputs")
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: n,h,w mismatch {tensors[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)
    return _make(out, tensors, lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors))))


def stack_batch(tensors: Iterable[Tensor]) -> Tensor:
    tensors = list(tensors)
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=0)
    return _make(out, tensors, lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors))))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def zero_pad(a: Tensor, bottom: int = 0, right: int = 0) -> Tensor:
    """Append zero rows/columns to the trailing (h, w) axes."""
    h, w = a.shape[-2:]
    widths = [(0, 0)] * (a.data.ndim - 2) + [(0, bottom), (0, right)]
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[..., :h, :w],))
