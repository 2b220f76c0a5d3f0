"""Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure mapping the output gradient to one
gradient per parent. ``backward`` sweeps the recorded graph in reverse
topological order and sums incoming gradients in the order they were recorded,
so repeated runs accumulate bit-identically.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ArgumentError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        return backward(self)


def tensor(data, requires_grad=False, name=None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def _wrap(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_axis(axis: int, ndim: int) -> int:
    if not isinstance(axis, (int, np.integer)) or not -ndim <= axis < ndim:
        raise ArgumentError(f"axis {axis!r} invalid for a {ndim}-d tensor")
    return int(axis) % ndim


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.data)
    out = a.data + b.data

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), fn)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        b = _wrap(b)
        a = _wrap(a, b.data)
    else:
        b = _wrap(b, a.data)
    out = a.data - b.data

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), fn)


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.data)
    out = a.data * b.data

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), fn)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    k = xd.dtype.type(0.044715)
    sq = xd * xd
    t = np.tanh(c * xd * (1 + k * sq))
    out = 0.5 * xd * (1 + t)

    def fn(g):
        local = 0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * (c * (1 + 3 * k * sq))
        return (g * local,)

    return _result(out.astype(xd.dtype, copy=False), (x,), fn)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def fn(g):
        return (g * (1.0 - t * t),)

    return _result(t, (x,), fn)


# ------------------------------------------------------------------- shaping

def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def fn(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), fn)


def transpose(x: Tensor, axes=()) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    out = x.data.transpose(axes)
    inv = np.argsort(axes)

    def fn(g):
        return (g.transpose(inv),)

    return _result(out, (x,), fn)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def fn(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.ascontiguousarray(out), (x,), fn)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_wrap(x) for x in xs]
    if not xs:
        raise ArgumentError("concat needs at least one tensor")
    axis = _check_axis(axis, xs[0].ndim)
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def fn(g):
        grads = []
        for i, x in enumerate(xs):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(sl)] if x.requires_grad else None)
        return tuple(grads)

    return _result(out, xs, fn)


def gather_rows(x: Tensor, batch_idx, pos_idx) -> Tensor:
    """Pick rows ``x[batch_idx[i], pos_idx[i], :]`` from a [B, T, D] tensor."""
    b = np.asarray(batch_idx, dtype=np.int64)
    t = np.asarray(pos_idx, dtype=np.int64)
    out = x.data[b, t]

    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (b, t), g)
        return (full,)

    return _result(out, (x,), fn)


def scatter_rows(x: Tensor, batch_idx, pos_idx, shape) -> Tensor:
    """Zeros of ``shape`` [B, T, D] with row i of x [n, D] placed at (batch_idx[i], pos_idx[i])."""
    b = np.asarray(batch_idx, dtype=np.int64)
    t = np.asarray(pos_idx, dtype=np.int64)
    out = np.zeros(shape, dtype=x.dtype)
    out[b, t] = x.data

    def fn(g):
        return (g[b, t],)

    return _result(out, (x,), fn)


# --------------------------------------------------------------- reductions

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _result(out, (x,), fn)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


# ------------------------------------------------------------------- linalg

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.data)
    out = np.matmul(a.data, b.data)

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), fn)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ArgumentError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(out, (table,), fn)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution over time. x: [B, T, Cin], w: [Cout, Cin, k] -> [B, T_out, Cout]."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ArgumentError(f"conv1d shape mismatch: x {x.shape}, w {w.shape}")
    if stride < 1:
        raise ArgumentError("stride must be >= 1")
    bsz, t_in, c_in = x.shape
    c_out, _, k = w.shape
    t_out = (t_in + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise ArgumentError(f"input length {t_in} too short for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    cols = xp[:, idx, :].reshape(bsz, t_out, k * c_in)
    w2 = w.data.transpose(2, 1, 0).reshape(k * c_in, c_out)
    out = cols @ w2
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (g @ w2.T).reshape(bsz, t_out, k, c_in)
            gxp = np.zeros_like(xp)
            np.add.at(gxp, (slice(None), idx), gcols)
            gx = gxp[:, padding:padding + t_in] if padding else gxp
        if w.requires_grad:
            gw2 = cols.reshape(-1, k * c_in).T @ g.reshape(-1, c_out)
            gw = gw2.reshape(k, c_in, c_out).transpose(2, 1, 0)
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, c_out).sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _result(out, parents, fn)


# ---------------------------------------------------------- normalization

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def fn(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = (inv / n) * (n * dxhat - dxhat.sum(-1, keepdims=True)
                              - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        return gx, gg, gb

    return _result(out.astype(xd.dtype, copy=False), (x, gain, bias), fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), fn)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over positions whose target != ignore_index.

    ``logits`` has shape [..., V]; ``targets`` has the leading shape. With every
    position ignored the loss is 0 and the gradient is all zeros.
    """
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ArgumentError(f"targets shape {targets.shape} vs logits {logits.shape}")
    flat_t = targets.reshape(-1)
    keep = flat_t != ignore_index
    if np.any((flat_t[keep] < 0) | (flat_t[keep] >= v)):
        raise ArgumentError(f"target id out of range [0, {v})")
    flat = logits.data.reshape(-1, v)
    n = int(keep.sum())
    if n == 0:
        return _result(np.zeros((), dtype=logits.dtype), (logits,),
                       lambda g: (np.zeros_like(logits.data),))
    rows = np.nonzero(keep)[0]
    z = flat[rows] - flat[rows].max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), flat_t[rows]]
    loss = np.asarray(nll.sum() / n, dtype=logits.dtype)

    def fn(g):
        full = np.zeros_like(flat)
        p = np.exp(z - lse[:, None])
        p[np.arange(n), flat_t[rows]] -= 1.0
        full[rows] = p * (g / n)
        return (full.reshape(logits.shape),)

    return _result(loss, (logits,), fn)


# ----------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar. Leaves get ``.grad``; named leaves are returned."""
    if loss.data.size != 1:
        raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    out: dict[str, np.ndarray] = {}
    if not loss.requires_grad:
        return out
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            if node.name is not None:
                out[node.name] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg
    return out


def leaves(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t._backward is None]
