"""Minimal define-by-run reverse-mode autodiff over dense numpy arrays.

Only the primitives the MAE model needs are provided. Every op records its
parents and a closure that maps the output gradient to parent gradients;
:meth:`Tensor.backward` walks the graph in reverse topological order.

Compute dtype is float32 by default. Wrapping float64 arrays (or using
:func:`default_dtype`) runs the same graph in float64, which the gradient
tests use as a shadow evaluation.
"""

from __future__ import annotations

import contextlib
import math
import os
from typing import Callable, Iterable, Sequence

import numpy as np

DEBUG = os.environ.get("LSMAE_DEBUG", "") not in ("", "0")

_DEFAULT_DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for non-array tensor data."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    return np.asarray(data, dtype=_DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    if DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` over broadcast leading axes."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_suffix_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    # only broadcasting over leading axes is supported
    if a.shape == b.shape:
        return
    short, long_ = (a, b) if a.ndim <= b.ndim else (b, a)
    if long_.shape[long_.ndim - short.ndim:] != short.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c_arr = a.data.dtype.type(c)
    return _make(a.data * c_arr, (a,), lambda g: (g * c_arr,), "scale")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + _GELU_K * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_K * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out.astype(xd.dtype, copy=False), (x,), bw, "gelu")


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., M, K] @ [..., K, N]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not compatible")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not compatible") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as ``[in, out]``."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(out, tensors, bw, "concat")


def slice_(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    if not isinstance(index, tuple):
        index = (index,)
    for part in index:
        if not (isinstance(part, (int, slice)) or part is Ellipsis):
            raise TypeError("slice: only ints, slices and Ellipsis are supported")
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(np.array(out, copy=True), (x,), bw, "slice")


# ---------------------------------------------------------------- NN primitives


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        dxhat = g * gamma.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), bw, "layernorm")


def _check_indices(indices: np.ndarray, length: int, batch_shape: tuple[int, ...]) -> np.ndarray:
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise IndexError("row indices must be integers")
    idx = idx.astype(np.int64)
    if idx.ndim == 0 or idx.ndim > 2:
        raise IndexError(f"row indices must be 1-D or 2-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= length):
        raise IndexError(f"row index out of range [0, {length})")
    rows = idx.reshape(-1, idx.shape[-1])
    srt = np.sort(rows, axis=-1)
    if rows.shape[-1] > 1 and np.any(srt[:, 1:] == srt[:, :-1]):
        raise IndexError("duplicate row index")
    if idx.ndim == 2 and batch_shape != (idx.shape[0],):
        raise IndexError(f"per-sample indices {idx.shape} do not match batch {batch_shape}")
    return idx


def _expand_idx(idx: np.ndarray, ndim: int) -> np.ndarray:
    # [K] or [B, K] -> broadcastable index for take_along_axis on axis -2
    if idx.ndim == 1:
        return idx.reshape((1,) * (ndim - 2) + (-1, 1))
    return idx[:, :, None]


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows (axis -2) in the given order.

    ``indices`` is ``[K]`` (shared across leading dims) or ``[B, K]`` for a
    ``[B, L, D]`` input (per-sample rows).
    """
    if x.ndim < 2:
        raise ShapeError(f"gather_rows: need at least 2-D input, got {x.shape}")
    idx = _check_indices(indices, x.shape[-2], x.shape[:-2])
    e = _expand_idx(idx, x.ndim)
    if idx.ndim == 1:
        out = np.take(x.data, idx, axis=-2)
    else:
        out = np.take_along_axis(x.data, e, axis=-2)

    def bw(g):
        full = np.zeros_like(x.data)
        if idx.ndim == 1:
            full[..., idx, :] = g
        else:
            np.put_along_axis(full, e, g, axis=-2)
        return (full,)

    return _make(out, (x,), bw, "gather_rows")


def scatter_rows(x: Tensor, indices, length: int, fill: Tensor) -> Tensor:
    """Inverse of :func:`gather_rows`: place rows of ``x`` at ``indices`` in a
    length-``length`` sequence whose remaining rows are copies of ``fill``."""
    if x.ndim < 2:
        raise ShapeError(f"scatter_rows: need at least 2-D input, got {x.shape}")
    d = x.shape[-1]
    if fill.shape != (d,):
        raise ShapeError(f"scatter_rows: fill {fill.shape} vs row width {d}")
    idx = _check_indices(indices, length, x.shape[:-2])
    if idx.shape[-1] != x.shape[-2]:
        raise IndexError(f"{idx.shape[-1]} indices for {x.shape[-2]} rows")
    out_shape = x.shape[:-2] + (length, d)
    out = np.broadcast_to(fill.data.astype(x.dtype), out_shape).copy()
    e = _expand_idx(idx, x.ndim)
    if idx.ndim == 1:
        out[..., idx, :] = x.data
        filled = np.ones(out_shape[:-1], dtype=bool)
        filled[..., idx] = False
    else:
        np.put_along_axis(out, e, x.data, axis=-2)
        filled = np.ones(out_shape[:-1], dtype=bool)
        np.put_along_axis(filled, idx, False, axis=-1)

    def bw(g):
        if idx.ndim == 1:
            gx = np.take(g, idx, axis=-2)
        else:
            gx = np.take_along_axis(g, e, axis=-2)
        gfill = (g * filled[..., None]).reshape(-1, d).sum(axis=0)
        return gx, gfill

    return _make(out, (x, fill), bw, "scatter_rows")


# ---------------------------------------------------------------- graph


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before consumers."""
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    Leaf gradients are overwritten, not accumulated, so repeated calls on the
    same graph give identical results.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.astype(node.dtype, copy=False)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
