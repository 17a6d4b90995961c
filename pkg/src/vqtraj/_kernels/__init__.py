"""Hot kernels, compiled when available.

The Cython extension ``_ext`` is used if it was built; otherwise the numpy
versions in ``_fallback`` are used. Setting ``VQTRAJ_PURE_PYTHON=1`` forces
the fallback. ``BACKEND`` names the active implementation.
"""
from __future__ import annotations

import importlib
import os

import numpy as np

from . import _fallback

_ext = None
if os.environ.get("VQTRAJ_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        _ext = importlib.import_module(f"{__name__}._ext")
    except ImportError:
        _ext = None

BACKEND = "cython" if _ext is not None else "numpy"


def nearest_entries(x: np.ndarray, entries: np.ndarray) -> np.ndarray:
    if _ext is not None and x.dtype == entries.dtype and x.dtype in (np.float32, np.float64):
        return _ext.nearest_entries(np.ascontiguousarray(x), np.ascontiguousarray(entries))
    return _fallback.nearest_entries(x, entries.astype(x.dtype, copy=False))


def masked_softmax_rows(x: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    if _ext is not None and x.dtype in (np.float32, np.float64):
        return _ext.masked_softmax_rows(
            np.ascontiguousarray(x), np.ascontiguousarray(allowed, dtype=np.uint8)
        )
    return _fallback.masked_softmax_rows(x, allowed.astype(bool, copy=False))


def scatter_add_rows(out: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> None:
    if (
        _ext is not None
        and out.flags.c_contiguous
        and out.dtype == rows.dtype
        and out.dtype in (np.float32, np.float64)
    ):
        _ext.scatter_add_rows(out, np.ascontiguousarray(ids, dtype=np.int64),
                              np.ascontiguousarray(rows))
        return
    _fallback.scatter_add_rows(out, ids, rows)


__all__ = ["BACKEND", "nearest_entries", "masked_softmax_rows", "scatter_add_rows"]
