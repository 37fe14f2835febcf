"""Float64 tensors with a reverse-mode gradient tape.

Operations are recorded only while a :class:`GradTape` is active and at least
one input requires a gradient; outside a tape every op is plain numpy
arithmetic. A tape is meant for a single forward pass and is cleared by
``backward``.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     loss = sum_(square(x))
    >>> tape.gradient(loss, [x])[0].data
    array([2., 4.])
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    """Immutable float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, *, _check: bool = True):
        arr = np.array(data, dtype=np.float64)
        if _check and not np.all(np.isfinite(arr)):
            raise NumericError("non-finite value in tensor data")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)

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
    def id(self) -> int:
        return id(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, _check=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class GradTape:
    """Ordered record of primitive ops for one forward pass.

    Nested tapes each record independently; the innermost active tape does
    not hide ops from outer ones.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._done = False

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        if self._done:
            raise RuntimeError("tape already consumed by backward()")
        self._records.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Gradient of scalar ``loss`` for every grad-requiring tensor on the tape.

        Returns a map from tensor id to gradient. Tensors that were recorded but
        do not influence ``loss`` get zeros. The tape is cleared afterwards.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        seen: dict[int, Tensor] = {}
        grads[id(loss)] = np.ones_like(loss.data)
        for out, inputs, vjp in reversed(self._records):
            for t in inputs:
                if t.requires_grad:
                    seen.setdefault(id(t), t)
            g = grads.pop(id(out), None)
            if g is None:
                continue
            parts = vjp(g)
            for t, gi in zip(inputs, parts):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = {}
        for key, t in seen.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(t.data)
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient")
            result[key] = Tensor(g, _check=False)
        self._records = []
        self._done = True
        return result

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[Tensor]:
        grads = self.backward(loss)
        out = []
        for s in sources:
            g = grads.get(id(s))
            if g is None:
                g = Tensor(np.zeros_like(s.data), _check=False)
            out.append(g)
        return out


def backward(loss: Tensor, tape: GradTape) -> dict[int, Tensor]:
    return tape.backward(loss)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        stack = _tape_stack()
        if stack:
            out.requires_grad = True
            for tape in stack:
                tape._record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


# -- binary elementwise -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    if np.any(b.data == 0):
        raise NumericError("division by zero")
    q = a.data / b.data
    return _emit(q, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * q / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# -- unary elementwise --------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _emit(e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Elementwise clip; gradient passes only where the value was not clipped."""
    a = as_tensor(a)
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = (a.data >= lo_) & (a.data <= hi_)
    return _emit(np.clip(a.data, lo_, hi_), (a,), lambda g: (g * inside,))


# -- reductions ---------------------------------------------------------------

def _expand(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _emit(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims).copy(),))


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    out = a.data.mean(axis=axis, keepdims=keepdims)
    return _emit(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims) / n,))


def max_(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; the gradient flows to the first maximal entry."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(idx, axis), gk, axis=axis)
        return (full,)

    return _emit(out, (a,), vjp)


def norm(a, axis: int | None = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis`` (whole tensor when ``axis`` is None).

    At a zero vector the subgradient 0 is used.
    """
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if keepdims:
        out = n
    elif axis is None:
        out = n.reshape(())
    else:
        out = np.squeeze(n, axis=axis)

    def vjp(g):
        gk = np.reshape(g, n.shape)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, gk * a.data / safe, 0.0),)

    return _emit(out, (a,), vjp)


def l2_norm(a) -> Tensor:
    """Norm of a whole vector, returned as a scalar tensor."""
    return norm(a, axis=None)


# -- softmax family -----------------------------------------------------------

def softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (a,), vjp)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (a,), vjp)


# -- shape and indexing -------------------------------------------------------

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),))


def take_rows(a, idx) -> Tensor:
    """Gather rows of ``a`` along axis 0; ``idx`` may have any shape."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ShapeError(f"row index out of range for {a.shape[0]} rows")

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(a.data[idx], (a,), vjp)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _emit(a.data[start:stop], (a,), vjp)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))
