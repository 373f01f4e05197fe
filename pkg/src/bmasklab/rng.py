"""Deterministic random streams based on splitmix64.

Every random draw in the package (weight init, scene generation, scene
sampling during training) goes through this module so that fixtures and
checkpoints are reproducible bit-for-bit across platforms. splitmix64 is
a counter-based generator: output i depends only on seed + (i+1)*GOLDEN,
which also makes vectorized generation trivial.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK64
    return z ^ (z >> 31)


def mix64(*values: int) -> int:
    """Fold integers into one well-mixed 64-bit seed."""
    acc = 0x243F6A8885A308D3
    for v in values:
        acc = _mix((acc + (v & MASK64) + GOLDEN) & MASK64)
    return acc


def fnv1a64(name: str) -> int:
    """Stable 64-bit string hash (python's hash() is salted per process)."""
    h = 0xCBF29CE484222325
    for byte in name.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


class SplitMix64:
    """Sequential splitmix64 stream with vectorized batch draws."""

    def __init__(self, seed: int):
        self._seed = seed & MASK64
        self._count = 0

    def u64(self) -> int:
        self._count += 1
        z = (self._seed + self._count * GOLDEN) & MASK64
        return _mix(z)

    def u64_array(self, n: int) -> np.ndarray:
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        z = np.uint64(self._seed) + idx * np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def uniform(self, shape=None, lo: float = 0.0, hi: float = 1.0):
        """Floats in [lo, hi) built from the top 53 bits."""
        if shape is None:
            u = (self.u64() >> 11) * 2.0**-53
            return lo + (hi - lo) * u
        n = int(np.prod(shape))
        u = (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (lo + (hi - lo) * u).reshape(shape)

    def below(self, n: int) -> int:
        """Integer in [0, n). Modulo bias is negligible for small n."""
        return self.u64() % n
