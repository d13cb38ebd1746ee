"""Portable, seed-deterministic random numbers.

Everything that must reproduce byte-for-byte across platforms (synthetic images,
split shuffles, prompt embedding tables) draws from :class:`CounterRNG`, never
from a library default generator.

Algorithm (counter-based SplitMix64):

    state_0 = seed mod 2**64
    x_i     = splitmix64_mix(state_0 + (i + 1) * 0x9E3779B97F4A7C15)   (mod 2**64)
    splitmix64_mix(z):
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        return z ^ (z >> 31)

A uniform double in [0, 1) is ``(x_i >> 11) * 2**-53``. Normals use the
Box-Muller transform on consecutive uniform pairs.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def splitmix64_mix(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def splitmix64(value: int) -> int:
    """Scalar SplitMix64 step: mix ``value + golden`` into a 64-bit hash."""
    z = np.uint64((value + 0x9E3779B97F4A7C15) & _MASK64)
    return int(splitmix64_mix(z))


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a over the UTF-8 bytes of ``text``."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


class CounterRNG:
    """Counter-based generator; the stream is a pure function of the seed."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * GOLDEN
        return splitmix64_mix(z)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        n = int(np.prod(shape)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(shape)

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in [low, high)."""
        return low + min(int(self.uniform() * (high - low)), high - low - 1)

    def normal(self, size) -> np.ndarray:
        shape = size if isinstance(size, tuple) else (size,)
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1 - u1 lies in (0, 1]
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
