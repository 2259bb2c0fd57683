"""Dense tensor math with tape-based reverse-mode autodiff.

Every op records its parents and a backward closure on the tensor it
produces; ``backward()`` replays the tape in reverse topological order.
Graphs live for one forward/backward pass and are confined to a single
thread. Default dtype is float32; float64 inputs are kept as-is so
gradient-check oracles can run at higher precision.
"""

from __future__ import annotations

import math
from typing import Iterable, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape recording (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor data contains NaN/Inf")
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            if g.dtype == self.data.dtype:
                self.grad = g.copy()
            else:
                self.grad = g.astype(self.data.dtype)
        else:
            self.grad += g

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- autodiff -------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.data.shape))

    return Tensor._from_op(out_data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    axes = tuple(axes)
    out_data = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        x._accumulate(np.transpose(g, inv))

    return Tensor._from_op(out_data, (x,), backward)


def slice_(x: Tensor, key) -> Tensor:
    out_data = x.data[key]

    def backward(g):
        full = np.zeros_like(x.data)
        full[key] = g
        x._accumulate(full)

    return Tensor._from_op(out_data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._from_op(out_data, tuple(tensors), backward)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims, dtype=x.data.dtype)
    out_data = np.asarray(out_data)

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    return Tensor._from_op(out_data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def backward(g):
        x._accumulate(g * (x.data > 0))

    return Tensor._from_op(out_data, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation, matches GPT-2 style blocks
    c = x.data.dtype.type(math.sqrt(2.0 / math.pi))
    k = x.data.dtype.type(0.044715)
    half = x.data.dtype.type(0.5)
    x2 = x.data * x.data
    t = np.tanh(c * (x.data + k * (x2 * x.data)))
    out_data = half * x.data * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3.0 * k * x2)
        grad = half * (1.0 + t) + half * x.data * ((1.0 - t * t) * dinner)
        x._accumulate(g * grad)

    return Tensor._from_op(out_data, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - t * t))

    return Tensor._from_op(t, (x,), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    y = softmax_lastdim_np(x.data)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        x._accumulate((y * (g - dot)).astype(x.data.dtype))

    return Tensor._from_op(y, (x,), backward)


def softmax_lastdim_np(x: np.ndarray) -> np.ndarray:
    """Numerically-stable softmax over the last axis, plain ndarray."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mean = x.data.mean(axis=-1, keepdims=True, dtype=x.data.dtype)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True, dtype=x.data.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = (xhat * gain.data + bias.data).astype(x.data.dtype)

    def backward(g):
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.data.shape))
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.data.shape))
        if x.requires_grad:
            gx_hat = g * gain.data
            term1 = gx_hat
            term2 = gx_hat.mean(axis=-1, keepdims=True)
            term3 = xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(((term1 - term2 - term3) * inv).astype(x.data.dtype))

    return Tensor._from_op(out_data, (x, gain, bias), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding id out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out_data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return Tensor._from_op(out_data, (table,), backward)


def cross_entropy_with_logits(
    logits: Tensor, targets: Sequence[int], mask: Sequence[bool]
) -> Tensor:
    """Sum over masked positions of -log softmax(logits)[target].

    ``logits`` is [T, V]; an all-false mask yields an exact zero with zero
    gradients.
    """
    t = np.asarray(targets, dtype=np.int64)
    m = np.asarray(mask, dtype=bool)
    T, V = logits.data.shape
    if t.shape != (T,) or m.shape != (T,):
        raise ShapeError(
            f"targets/mask lengths {t.shape}/{m.shape} do not match logits rows {T}"
        )
    if m.any() and (t[m].min() < 0 or t[m].max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=-1, dtype=logits.data.dtype))
    safe_t = np.where(m, t, 0)
    nll = logsumexp - shifted[np.arange(T), safe_t]
    out_data = np.asarray((nll * m).sum(dtype=logits.data.dtype))

    def backward(g):
        probs = softmax_lastdim_np(logits.data)
        grad = probs.copy()
        grad[np.arange(T), safe_t] -= 1.0
        grad *= m[:, None]
        logits._accumulate(grad * g)

    return Tensor._from_op(out_data, (logits,), backward)
