"""Small network building blocks written against the numcore ops."""
from __future__ import annotations

import math

import numpy as np

from .numcore import Rng, Tensor
from .numcore import ops


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


def init_linear(rng: Rng, fan_in: int, fan_out: int, scale: float = 1.0) -> tuple[Tensor, Tensor]:
    w = rng.normal((fan_in, fan_out), scale=scale / math.sqrt(fan_in))
    return param(w), param(np.zeros(fan_out))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ops.matmul(x, w)
    return ops.bias_add(y, b) if b is not None else y


def init_attention(rng: Rng, d: int, prefix: str = "") -> dict[str, Tensor]:
    out = {}
    for name in ("Wq", "Wk", "Wv", "Wo"):
        out[prefix + name] = param(rng.normal((d, d), scale=1.0 / math.sqrt(d)))
    return out


def attention(x: Tensor, p: dict[str, Tensor], heads: int, allowed: np.ndarray,
              prefix: str = "") -> Tensor:
    """Multi-head self-attention over axis 1 of ``x`` (B, T, d)."""
    b, t, d = x.shape
    dk = d // heads

    def split(y: Tensor) -> Tensor:  # (B, T, d) -> (B, H, T, dk)
        return ops.transpose(ops.reshape(y, (b, t, heads, dk)), (0, 2, 1, 3))

    q = split(ops.matmul(x, p[prefix + "Wq"]))
    k = ops.transpose(ops.reshape(ops.matmul(x, p[prefix + "Wk"]), (b, t, heads, dk)), (0, 2, 3, 1))
    v = split(ops.matmul(x, p[prefix + "Wv"]))
    scores = ops.scale(ops.matmul(q, k), 1.0 / math.sqrt(dk))
    weights = ops.masked_softmax(scores, allowed)
    ctx = ops.reshape(ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3)), (b, t, d))
    return ops.matmul(ctx, p[prefix + "Wo"])


def positions(table: Tensor, batch: int, length: int) -> Tensor:
    """Rows 0..length-1 of a positional table, repeated over the batch."""
    return ops.embedding(table, np.broadcast_to(np.arange(length), (batch, length)))
