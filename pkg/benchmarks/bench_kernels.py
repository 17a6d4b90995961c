"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 50]

Shapes follow the default pipeline: 3200 trajectories x 5 memory slots
against a 64-entry memory of width 16, attention rows for a 10-token
window with 4 heads, and gradient scatter into the 64 x 16 memory.
"""
import argparse
import statistics
import time

import numpy as np

from vqtraj._kernels import _fallback

try:
    from vqtraj._kernels import _ext
except ImportError:
    _ext = None


def timeit(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times) * 1e3


def cases(dtype):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3200 * 5, 16)).astype(dtype)
    entries = rng.normal(size=(64, 16)).astype(dtype)
    t = 10
    allowed = np.tril(np.ones((t, t), dtype=bool))
    allowed[:, :4] = True
    scores = rng.normal(size=(256 * 4 * t, t)).astype(dtype)
    ids = rng.integers(0, 64, size=3200 * 5)
    rows = rng.normal(size=(3200 * 5, 16)).astype(dtype)
    out = np.zeros((64, 16), dtype=dtype)
    allowed_u8 = allowed.astype(np.uint8)
    return {
        "nearest_entries": (lambda: _fallback.nearest_entries(x, entries),
                            lambda: _ext.nearest_entries(x, entries)),
        "masked_softmax_rows": (lambda: _fallback.masked_softmax_rows(scores, allowed),
                                lambda: _ext.masked_softmax_rows(scores, allowed_u8)),
        "scatter_add_rows": (lambda: _fallback.scatter_add_rows(out, ids, rows),
                             lambda: _ext.scatter_add_rows(out, ids, rows)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    if _ext is None:
        raise SystemExit("compiled extension not built; run `python3 setup.py build_ext --inplace`")
    print(f"{'kernel':<22}{'dtype':<9}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for dtype in (np.float32, np.float64):
        for name, (slow, fast) in cases(dtype).items():
            a, b = timeit(slow, args.repeat), timeit(fast, args.repeat)
            print(f"{name:<22}{np.dtype(dtype).name:<9}{a:>10.3f}{b:>11.3f}{a / b:>8.1f}x")


if __name__ == "__main__":
    main()
