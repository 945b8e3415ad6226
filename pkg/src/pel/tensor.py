"""Dense tensors with reverse-mode gradient accumulation.

The operation set is closed and small: exactly what a pre-norm Transformer
encoder, the attachable tuning modules, the classifier heads, and the losses
need. Forward values live in numpy arrays (float32 for training, float64 for
gradient checks, uint8/int64 for data); each recorded operation keeps a
vector-Jacobian closure, and ``backward`` replays the tape in reverse
topological order.

Tensors are immutable after creation except for their ``grad`` buffers.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

FLOAT_DTYPES = (np.float32, np.float64)
ALLOWED_DTYPES = (np.float32, np.float64, np.uint8, np.int64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _is_float(arr: np.ndarray) -> bool:
    return arr.dtype in (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """A dense n-dimensional array, optionally tracked on the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype == np.dtype(np.float16) or arr.dtype == np.dtype(np.int32):
            arr = arr.astype(np.float32 if arr.dtype.kind == "f" else np.int64)
        if arr.dtype not in [np.dtype(d) for d in ALLOWED_DTYPES]:
            raise TypeError(f"unsupported dtype {arr.dtype}; allowed: f32, f64, u8, i64")
        if requires_grad and not _is_float(arr):
            raise TypeError(f"requires_grad tensor must be floating, got {arr.dtype}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    # -- construction of tape nodes -------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], vjp) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # -- basic properties ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, shape {self.shape}")
        return self.data.reshape(()).item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_float(*tensors: Tensor) -> None:
    for t in tensors:
        if not _is_float(t.data):
            raise TypeError(f"operation requires floating dtype, got {t.dtype}")
    first = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != first:
            raise TypeError(f"mixed floating dtypes: {first} vs {t.data.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# -- elementwise and structural ops -----------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_float(a, b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from e

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_float(a, b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from e

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_float(a, b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from e

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(data, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_float(a, b)
    try:
        data = a.data / b.data
    except ValueError as e:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not broadcast") from e

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return Tensor._result(data, (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    _check_float(x)
    c = x.data.dtype.type(c)
    data = x.data * c

    def vjp(g):
        return (g * c,)

    return Tensor._result(data, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    _check_float(x)
    data = np.maximum(x.data, 0)

    def vjp(g):
        return (g * (x.data > 0),)

    return Tensor._result(data, (x,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    Backward accumulates dA = dC·Bᵀ and dB = Aᵀ·dC (batch axes reduced).
    """
    _check_float(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._result(data, (a, b), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stabilized softmax along ``axis``; rows sum to one."""
    _check_float(x)
    axis = _normalize_axis(axis, x.ndim)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        tmp = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - tmp),)

    return Tensor._result(y, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_float(x)
    axis = _normalize_axis(axis, x.ndim)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def vjp(g):
        soft = np.exp(y)
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(y, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization over the last axis, then affine gamma/beta."""
    _check_float(x, gamma, beta)
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta must be ({d},), got {gamma.shape} and {beta.shape}"
        )
    dt = x.data.dtype
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def vjp(g):
        reduce_axes = tuple(range(g.ndim - 1))
        g_gamma = (g * xhat).sum(axis=reduce_axes) if reduce_axes else g * xhat
        g_beta = g.sum(axis=reduce_axes) if reduce_axes else g
        gx_hat = g * gamma.data
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gx_hat - m1 - xhat * m2)
        return gx, g_gamma.reshape(gamma.shape), g_beta.reshape(beta.shape)

    return Tensor._result(data, (x, gamma, beta), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    axis = _normalize_axis(axis, tensors[0].ndim)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, indices=range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return Tensor._result(data, tensors, vjp)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    axis = _normalize_axis(axis, x.ndim)
    n = x.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice [{start}:{stop}) out of range for extent {n}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = x.data[idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return Tensor._result(data, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return Tensor._result(data, (x,), vjp)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    data = np.swapaxes(x.data, a, b)

    def vjp(g):
        return (np.swapaxes(g, a, b),)

    return Tensor._result(data, (x,), vjp)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from e

    def vjp(g):
        return (_unbroadcast(g, x.shape),)

    return Tensor._result(data, (x,), vjp)


def sum_(x: Tensor, axis=None) -> Tensor:
    _check_float(x)
    data = x.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor._result(np.asarray(data), (x,), vjp)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[_normalize_axis(axis, x.ndim)]
    return scale(sum_(x, axis), 1.0 / n)


def l2_norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm of each slice along ``axis`` (axis is reduced away)."""
    _check_float(x)
    axis = _normalize_axis(axis, x.ndim)
    norms = np.sqrt((x.data * x.data).sum(axis=axis))

    def vjp(g):
        denom = np.where(norms == 0, 1.0, norms)
        gx = np.expand_dims(g / denom, axis) * x.data
        return (gx,)

    return Tensor._result(norms, (x,), vjp)


def gather_rows(x: Tensor, index) -> Tensor:
    """Pick x[index] for rank-1 x, or x[i, index[i]] per row for rank-2 x."""
    idx = np.asarray(index)
    if x.ndim == 1:
        data = x.data[idx]

        def vjp(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            return (gx,)

    elif x.ndim == 2:
        rows = np.arange(x.shape[0])
        if idx.shape != (x.shape[0],):
            raise ShapeError(f"gather_rows: index shape {idx.shape} != ({x.shape[0]},)")
        data = x.data[rows, idx]

        def vjp(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, (rows, idx), g)
            return (gx,)

    else:
        raise ShapeError(f"gather_rows supports rank 1 or 2, got {x.ndim}")
    return Tensor._result(data, (x,), vjp)


# -- backward ---------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``root``.

    ``root`` must be a recorded floating scalar. Repeated calls accumulate
    into leaf grads until they are cleared.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    if not _is_float(root.data):
        raise TypeError(f"backward root must be floating, got {root.dtype}")
    if not root.requires_grad:
        raise ValueError("backward root is not attached to the tape")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    flowing: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad = node.grad + g
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in flowing:
                flowing[id(p)] = flowing[id(p)] + pg
            else:
                flowing[id(p)] = pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
