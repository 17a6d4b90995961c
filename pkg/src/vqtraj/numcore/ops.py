"""Differentiable tensor operations.

Broadcasting is deliberately narrow: binary elementwise ops accept two
tensors of the same shape, or a tensor and a Python scalar. The only other
broadcast is ``bias_add`` along the last axis, and ``matmul`` against a 2-D
right operand shared by every batch entry.
"""
from __future__ import annotations

from numbers import Real
from typing import Sequence

import numpy as np

from .. import _kernels
from .tensor import Tensor, record


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only same-shape or scalar)")


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim and b.ndim:
        _same_shape(a, b, op)


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    # a 0-d operand received the same gradient at every element
    return g.sum() if t.ndim == 0 and g.ndim else g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Real):
        return record(a.data + a.dtype.type(b), (a,), lambda g: (g,))
    if isinstance(a, Real):
        return add(b, a)
    _check_pair(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Real):
        return record(a.data - a.dtype.type(b), (a,), lambda g: (g,))
    _check_pair(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Real):
        return scale(a, b)
    if isinstance(a, Real):
        return scale(b, a)
    _check_pair(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, a), _unbroadcast(g * ad, b)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return record(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return record(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` broadcast along every axis but the last."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def square(a: Tensor) -> Tensor:
    return mul(a, a)


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return record(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return record(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                  lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across the batch axes of ``a``) or has the
    same batch axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record(ad @ bd, (a, b), back)


# ---------------------------------------------------------------------------
# attention and normalisation
# ---------------------------------------------------------------------------

def masked_softmax(logits: Tensor, allowed: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``allowed`` keys.

    ``allowed`` is a boolean [T x T] matrix (query row, key column) that
    applies to every leading index of ``logits`` (shape [..., T, T]), or a
    boolean array of exactly the logits' shape. Blocked keys get weight 0.
    """
    allowed = np.asarray(allowed, dtype=bool)
    x = logits.data
    if not allowed.any(axis=-1).all():
        raise ValueError("masked_softmax: a query row has every key blocked")
    t = x.shape[-1]
    if allowed.shape == (t, t) and x.ndim >= 2 and x.shape[-2] == t:
        y = _kernels.masked_softmax_rows(x.reshape(-1, t), allowed).reshape(x.shape)
    else:
        if allowed.shape != x.shape:
            raise ShapeError(f"masked_softmax: mask {allowed.shape} vs logits {x.shape}")
        z = np.where(allowed, x, -np.inf)
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(y, (logits,), back)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layernorm needs a last axis of at least 2")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain/bias must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def back(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record(xhat * gd + bias.data, (x, gain, bias), back)


# ---------------------------------------------------------------------------
# indexing and losses
# ---------------------------------------------------------------------------

def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (K x d); the result has shape ids.shape + (d,)."""
    ids = np.asarray(ids, dtype=np.int64)
    k = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= k):
        raise IndexError(f"embedding: ids must lie in [0, {k})")
    flat = ids.reshape(-1)

    def back(g):
        gt = np.zeros_like(table.data)
        _kernels.scatter_add_rows(gt, flat, np.ascontiguousarray(g.reshape(flat.size, -1)))
        return (gt,)

    return record(table.data[ids], (table,), back)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean negative log-likelihood of ``targets`` under ``logits`` (n x K)."""
    if logits.ndim != 2:
        raise ShapeError("cross_entropy expects 2-D logits")
    n, k = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {targets.shape[0] if targets.ndim else 0} targets for {n} rows")
    if n and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"cross_entropy: targets must lie in [0, {k})")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or (w < 0).any() or w.sum() <= 0:
        raise ValueError("cross_entropy: weights must be nonnegative and not all zero")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    wn = (w / w.sum()).astype(x.dtype)
    loss = -(wn * logp[rows, targets]).sum()

    def back(g):
        p = np.exp(logp)
        p[rows, targets] -= 1
        return (g * wn[:, None] * p,)

    return record(np.asarray(loss, dtype=x.dtype), (logits,), back)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain array helper (no tape)."""
    m = x.max(axis=axis, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# gradient routing
# ---------------------------------------------------------------------------

def stop_gradient(a: Tensor) -> Tensor:
    """Same value, never differentiated through."""
    return Tensor._result(a.data, False)


def straight_through(v_a: Tensor, v_q: Tensor) -> Tensor:
    """Forward value of ``v_q``; backward passes the gradient to ``v_a`` unchanged."""
    _same_shape(v_a, v_q, "straight_through")
    return record(v_q.data.copy(), (v_a,), lambda g: (g,))


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = sub(a, b)
    return mean(mul(d, d))
