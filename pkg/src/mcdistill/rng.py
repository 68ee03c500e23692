"""Counter-based random streams.

Each :class:`Rng` is a Philox stream keyed by ``(seed, *path)``.  Forking by a
path (epoch, step, scale, ...) gives a stream that depends only on its key, so
draws are reproducible no matter in which order streams are consumed.
"""

from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def fork(self, *key: int) -> "Rng":
        return Rng(self.seed, self.path + tuple(key))

    def uniform(self, shape, dtype=np.float64) -> np.ndarray:
        """Uniforms in [0, 1); float32 draws are exactly k / 2^24."""
        return self._gen.random(shape, dtype=dtype)

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
