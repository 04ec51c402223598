"""Minimal reverse-mode differentiation over dense numpy arrays.

Each op returns a new :class:`Tensor` and, when any input requires a gradient,
records a closure that maps the output adjoint to input adjoints. Calling
``backward()`` on a scalar walks the recorded graph once in reverse
topological order.

Leading batch axes are supported where the encoder needs them (batched matmul,
row-wise softmax / layer norm over the last axis). Elementwise ops follow numpy
broadcasting and reduce adjoints back to the operand shape.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import ConfigError, DimensionError, NumericDegeneracyError, TrainingDivergenceError

EPS = 1e-5

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, name={self.name!r})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        for node in order:
            node.grad = None
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in seen and p.requires_grad:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ------------------------------------------------------------------ linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch shapes differ {a.shape} vs {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise DimensionError("matmul: batched right operand needs a batched left operand")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if bd.ndim == 2:
            if a.requires_grad:
                ga = _flat_matmul(g, bd.T)
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _node(_flat_matmul(ad, bd) if bd.ndim == 2 else ad @ bd, (a, b), bw)


def _flat_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # one GEMM instead of numpy's per-slice loop for stacked @ 2-D
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[-1],))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _node(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, src),))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def concat_columns(tensors: Iterable) -> Tensor:
    return concat(tensors, axis=-1)


def take_rows(table, idx) -> Tensor:
    """Gather rows ``table[idx]`` (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)
    contiguous = idx.ndim == 1 and len(idx) > 0 and np.array_equal(idx, np.arange(idx[0], idx[0] + len(idx)))

    def bw(g):
        out = np.zeros_like(table.data)
        if contiguous:
            out[idx[0]:idx[0] + len(idx)] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(table.data[idx], (table,), bw)


def pick(x, idx) -> Tensor:
    """``x[i, idx[i]]`` for a 2-D tensor."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(x.shape[0])

    def bw(g):
        out = np.zeros_like(x.data)
        out[rows, idx] = g
        return (out,)

    return _node(x.data[rows, idx], (x,), bw)


# ------------------------------------------------------------------ elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _node(ad * bd, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _node(np.maximum(a.data, a.dtype.type(0)), (a,), lambda g: (np.where(on, g, a.dtype.type(0)),))


def softplus(a) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _node(out, (a,), lambda g: (g * sig,))


# ------------------------------------------------------------------ reductions

def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    src = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis)), (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    if axis is not None:
        return scale(sum(a, axis=axis), 1.0 / a.shape[axis])
    n = a.data.size
    x0 = a.data.flat[0]
    # shifted form: exact when all entries are equal
    out = np.asarray(x0 + (a.data - x0).sum() / n, dtype=a.dtype)
    src = a.shape
    return _node(out, (a,), lambda g: (np.full(src, g / n, dtype=a.dtype),))


def mean_rows(x) -> Tensor:
    return mean(x, axis=0)


# ------------------------------------------------------------------ row-wise ops

def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x).reshape(-1, x.shape[-1])


def softmax_rows(x, temperature: float = 1.0, mask=None) -> Tensor:
    """Softmax over the last axis of ``x / temperature``.

    ``mask`` (broadcastable to ``x``) marks the admissible entries; excluded
    entries get probability 0. Every row needs at least one admissible entry.
    """
    if not temperature > 0:
        raise ConfigError(f"softmax temperature must be > 0, got {temperature}")
    x = as_tensor(x)
    shape = x.shape
    z = _rows(x.data / temperature if temperature != 1.0 else x.data)
    if mask is None:
        y = _kernels.softmax_rows(z)
    else:
        m = np.ascontiguousarray(np.broadcast_to(mask, shape)).reshape(z.shape)
        y = _kernels.masked_softmax_rows(z, m)

    def bw(g):
        gx = _kernels.softmax_rows_bwd(y, _rows(g))
        if temperature != 1.0:
            gx = gx / temperature
        return (gx.reshape(shape),)

    return _node(y.reshape(shape), (x,), bw)


def log_softmax(x, mask=None) -> Tensor:
    """Log-softmax over the last axis; excluded entries are returned as 0."""
    x = as_tensor(x)
    xd = x.data
    if mask is None:
        z = xd - xd.max(axis=-1, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        p = np.exp(out)
    else:
        mask = np.broadcast_to(mask, xd.shape)
        z = np.where(mask, xd, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out = np.where(mask, out, 0.0).astype(xd.dtype)
        p = np.where(mask, np.exp(out), 0.0).astype(xd.dtype)

    def bw(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(out, (x,), bw)


def layer_norm(x, gain, bias, epsilon: float = EPS) -> Tensor:
    if not epsilon > 0:
        raise ConfigError("layer_norm epsilon must be > 0")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},)")
    shape = x.shape
    y, xhat, rstd = _kernels.layer_norm_fwd(_rows(x.data), gain.data, bias.data, epsilon)

    def bw(g):
        dx, dgain, dbias = _kernels.layer_norm_bwd(_rows(g), xhat, rstd, gain.data)
        return dx.reshape(shape), dgain, dbias

    return _node(y.reshape(shape), (x, gain, bias), bw)


def _norms(x: np.ndarray) -> np.ndarray:
    n = np.sqrt((x * x).sum(axis=-1))
    if np.any(n < EPS):
        raise NumericDegeneracyError("cosine of a (near) zero-norm vector is undefined")
    return n


def cosine_rows(a, b) -> Tensor:
    """Cosine similarity along the last axis; operands share a shape."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine: shapes differ {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    na, nb = _norms(ad), _norms(bd)
    dot = (ad * bd).sum(axis=-1)
    c = dot / (na * nb)

    def bw(g):
        g = g[..., None]
        inv = (1.0 / (na * nb))[..., None]
        ga = g * (bd * inv - c[..., None] * ad / (na * na)[..., None]) if a.requires_grad else None
        gb = g * (ad * inv - c[..., None] * bd / (nb * nb)[..., None]) if b.requires_grad else None
        return ga, gb

    return _node(c, (a, b), bw)


def cosine(u, v) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1:
        raise DimensionError("cosine expects vectors; use cosine_rows for batches")
    return cosine_rows(u, v)


def normalize_rows(x) -> Tensor:
    """Scale each row (last axis) to unit L2 norm."""
    x = as_tensor(x)
    xd = x.data
    n = _norms(xd)[..., None]
    y = xd / n

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return _node(y, (x,), bw)


# ------------------------------------------------------------------ optimizer

def sgd_momentum_step(params: dict, grads: dict, velocity: dict | None, lr: float, momentum: float):
    """One heavy-ball step: ``v <- momentum*v + g``; ``w <- w - lr*v``.

    Returns new ``(params, velocity)`` dicts; the inputs are not modified.
    """
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
    velocity = velocity or {}
    new_p, new_v = {}, {}
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        if g.shape != w.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, expected {w.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for {name!r}")
        v = velocity.get(name)
        v = g.astype(w.dtype) if v is None else (momentum * v + g).astype(w.dtype)
        new_v[name] = v
        with np.errstate(over="ignore", invalid="ignore"):
            new_p[name] = (w - lr * v).astype(w.dtype) if lr else w.copy()
        if not np.all(np.isfinite(new_p[name])):
            raise TrainingDivergenceError(f"step overflowed parameter {name!r}")
    return new_p, new_v


class SGD:
    """Stateful wrapper that keeps the velocity buffers between steps."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict = {}

    def step(self, params: dict, grads: dict) -> dict:
        params, self.velocity = sgd_momentum_step(params, grads, self.velocity, self.lr, self.momentum)
        return params
