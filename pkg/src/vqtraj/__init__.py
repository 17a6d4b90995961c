"""Trajectory prediction over a learned discrete memory of motion fragments."""
import os

# Single-threaded BLAS keeps reductions in a fixed order (bitwise-reproducible
# training) and is faster at these matrix sizes anyway.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from ._kernels import BACKEND  # noqa: E402

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
