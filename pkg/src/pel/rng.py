"""Reproducible random streams.

A stream is a counter-based Philox generator keyed by (seed, stream index),
so child streams are independent and every draw sequence is bit-exact across
runs for the same seed.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x64"


class RngStream:
    """Seeded, splittable random source for init, sampling, and shuffling."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, stream: int) -> "RngStream":
        """Independent stream derived from the same seed."""
        return RngStream(self.seed, stream)

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * std).astype(dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=np.float32) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self) -> float:
        return float(self._gen.random())
