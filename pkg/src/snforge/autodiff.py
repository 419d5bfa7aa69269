"""Dense tensors with reverse-mode differentiation.

A deliberately small engine: every op records its parents and a closure that
pushes the output gradient back to them. ``Tensor.backward`` walks the graph
in reverse topological order. Gradients accumulate additively; call
``zero_grad`` between optimisation steps.

Broadcasting is limited to the trailing-axis cases the model needs: a bias
vector added to a batch of rows, or a constant array of identical shape.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, ParameterError, TargetIndexError

DEFAULT_DTYPE = np.float32

# Per-thread so that fitness workers evaluating under no_grad cannot switch
# recording off for a training loop running in another thread.
_local = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, teacher forward)."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- graph traversal --------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other: float):
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _check_trailing(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.ndim == 0:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if b.ndim > a.ndim:
        a, b = b, a
    _check_trailing(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if b.ndim > a.ndim:
        a, b = b, a
    _check_trailing(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        a._accum(g * c)

    return _make((a.data * c).astype(a.dtype, copy=False), (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a._accum(g * out_data)

    return _make(out_data, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
        a._accum(g * d)

    return _make(out.astype(a.dtype, copy=False), (a,), backward)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape} differ")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accum(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                b._accum(a2.T @ g2)
            else:
                b._accum(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    y = matmul(x, transpose(weight, (1, 0)))
    return add(y, bias) if bias is not None else y


# -- shape ops --------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        a._accum(g.reshape(a.shape))

    return _make(out, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def backward(g):
        a._accum(np.transpose(g, inv))

    return _make(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(int(lo), int(hi))
                t._accum(g[tuple(sl)])

    return _make(out, tensors, backward)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather ``indices`` along ``axis``; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[ax]):
        raise TargetIndexError(f"take: index out of range for axis {ax} of size {a.shape[ax]}")
    out = np.take(a.data, idx, axis=ax)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        a._accum(full)

    return _make(out, (a,), backward)


def take_along_last(a: Tensor, indices: np.ndarray) -> Tensor:
    """Per-row gather along the last axis (``indices`` has a's leading shape)."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take_along_axis(a.data, idx, axis=-1)

    def backward(g):
        full = np.zeros_like(a.data)
        flat_full = full.reshape(-1, a.shape[-1])
        flat_idx = idx.reshape(-1, idx.shape[-1])
        rows = np.repeat(np.arange(flat_full.shape[0]), flat_idx.shape[1])
        np.add.at(flat_full, (rows, flat_idx.ravel()), g.reshape(-1))
        a._accum(full)

    return _make(out, (a,), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise TargetIndexError(f"embedding: id out of range [0, {weight.shape[0]})")
    out = weight.data[ids]

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        weight._accum(full)

    return _make(out, (weight,), backward)


# -- reductions -------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _make(np.asarray(out, dtype=a.dtype), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


# -- normalisation and probabilities ----------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accum(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accum(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            n = x.shape[-1]
            dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                         - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
            x._accum(dx)

    return _make(out.astype(x.dtype, copy=False), (x, gain, bias), backward)


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")


def softmax_np(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    _check_temperature(temperature)
    s = z / temperature
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_np(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    _check_temperature(temperature)
    s = z / temperature
    s = s - s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(z: Tensor, temperature: float = 1.0) -> Tensor:
    p = softmax_np(z.data, temperature)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        z._accum(p * (g - inner) / temperature)

    return _make(p, (z,), backward)


def log_softmax(z: Tensor, temperature: float = 1.0) -> Tensor:
    out = log_softmax_np(z.data, temperature)

    def backward(g):
        p = np.exp(out)
        z._accum((g - p * g.sum(axis=-1, keepdims=True)) / temperature)

    return _make(out, (z,), backward)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(logits)."""
    t = np.asarray(targets, dtype=np.int64)
    c = logits.shape[-1]
    if t.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {t.shape} vs logits {logits.shape}")
    keep = t != ignore_index
    if np.any((t[keep] < 0) | (t[keep] >= c)):
        raise TargetIndexError(f"cross_entropy: target outside [0, {c})")
    flat = logits.data.reshape(-1, c)
    tk = t.reshape(-1)
    kf = keep.reshape(-1)
    n = int(kf.sum())
    logp = log_softmax_np(flat)
    safe_t = np.where(kf, tk, 0)
    picked = logp[np.arange(flat.shape[0]), safe_t]
    loss = -(picked * kf).sum() / max(n, 1)

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(flat.shape[0]), safe_t] -= 1.0
        grad *= (kf / max(n, 1))[:, None]
        logits._accum((grad * g).reshape(logits.shape))

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
