"""Counter-based SplitMix64 generator.

Every random draw in the package goes through :class:`SplitMix64` so that a
single integer seed reproduces datasets, parameter trees and drop-path masks
bit for bit. The stream is the textbook SplitMix64 sequence; draw ``i`` is a
pure function of ``(seed, i)``, which lets numpy produce whole blocks at once.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Sequential SplitMix64 stream with vectorised block draws."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        n = int(n)
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * _GOLDEN
            return _mix(z)

    def random(self, shape=()) -> np.ndarray:
        """Uniform doubles in [0, 1) with 53 bits of mantissa."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return low + (high - low) * self.random(shape)

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        # Box-Muller on pairs; draws 2*ceil(n/2) uniforms.
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.random((2, m))
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        theta = 2.0 * np.pi * u[1]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return mean + std * z.reshape(shape)

    def integers(self, high: int, shape=()) -> np.ndarray:
        """Integers in [0, high) (multiply-shift, bias below 2**-40 for small high)."""
        u = self.random(shape)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random(n), kind="stable")

    def spawn(self) -> "SplitMix64":
        """Independent child stream seeded from the next draw."""
        return SplitMix64(int(self.next_u64(1)[0]))
