"""Pure numpy implementations of the hot kernels.

Each function mirrors a routine in ``_ext.pyx`` and must agree with it:
exactly for integer outputs, to rounding for float outputs.
"""
from __future__ import annotations

import numpy as np


def nearest_entries(x: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the nearest row of ``entries`` for every row of ``x``.

    Squared distances accumulate in float64 one dimension at a time, in
    order, so the result is reproducible against a plain loop and float32
    near-ties are not decided by float32 rounding. Ties go to the lowest
    index (``argmin`` returns the first minimum).
    """
    n, d = x.shape
    x64, e64 = x.astype(np.float64, copy=False), entries.astype(np.float64, copy=False)
    dist = np.zeros((n, entries.shape[0]))
    for j in range(d):
        diff = x64[:, j, None] - e64[None, :, j]
        dist += diff * diff
    return np.argmin(dist, axis=1).astype(np.int64)


def masked_softmax_rows(x: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Softmax of each row of ``x`` (shape N x T) over allowed entries.

    Row ``r`` uses ``allowed[r % T]``; blocked entries come out as exactly 0.
    """
    n, t = x.shape
    mask = np.broadcast_to(allowed[None], (n // t, t, t)).reshape(n, t)
    z = np.where(mask, x, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def scatter_add_rows(out: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> None:
    """In place ``out[ids[i]] += rows[i]`` with repeated ids accumulated."""
    np.add.at(out, ids, rows)
