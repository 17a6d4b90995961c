"""Seeded random numbers.

``Rng`` wraps numpy's Philox generator, a counter-based 64-bit bit
generator: the stream is a pure function of (key, counter), so identical
seeds give identical draws on every platform numpy supports.
"""
from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, stream: int) -> "Rng":
        """Independent generator derived from this seed and a stream number."""
        return Rng((self.seed * 0x9E3779B97F4A7C15 + stream + 1) & 0xFFFFFFFFFFFFFFFF)

    @property
    def counter(self) -> np.ndarray:
        return self._gen.bit_generator.state["state"]["counter"]

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size=None, p=None, replace: bool = True):
        return self._gen.choice(n, size=size, p=p, replace=replace)

    def categorical(self, probs: np.ndarray) -> np.ndarray:
        """One draw per row of a row-stochastic matrix, by inverse CDF."""
        probs = np.atleast_2d(probs)
        u = self._gen.random(probs.shape[0])
        cdf = np.cumsum(probs, axis=1)
        idx = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=1)
        return np.minimum(idx, probs.shape[1] - 1)
