from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_tensor: int
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` with central differences.

    ``f`` closes over ``params`` and must be smooth at the current point; any
    discrete choice inside it (a quantizer assignment, a relu pattern) has to
    be held fixed by the caller. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``. With ``max_coords`` only that many
    randomly chosen coordinates per tensor are probed.
    """
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    worst, worst_i, count = 0.0, -1, 0
    for i, p in enumerate(params):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        a_flat = analytic[i].reshape(-1)
        for c in coords:
            orig = flat[c]
            with no_grad():
                flat[c] = orig + h
                fp = f().item()
                flat[c] = orig - h
                fm = f().item()
            flat[c] = orig
            num = (fp - fm) / (2 * h)
            a = float(a_flat[c])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            count += 1
            if err > worst:
                worst, worst_i = err, i
    return GradCheckReport(worst, worst_i, count, tolerance)
