"""Reproducible random streams built on SplitMix64.

SplitMix64 is a counter-based generator: the n-th output of a stream with
state ``s`` is ``mix(s + n * GAMMA)``.  That makes it trivially vectorisable
with numpy and lets any other implementation reproduce the exact stream.

Derived quantities:

* ``random``   -- top 53 bits of each output, scaled into [0, 1).
* ``normal``   -- Box-Muller on consecutive pairs of uniforms.
* ``integers`` -- ``floor(random() * high)`` (bias is below 2**-40 for the
  ranges used here).
* ``permutation`` -- stable argsort of ``n`` uniforms.
"""

from __future__ import annotations

import math
import zlib

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_TO_UNIT = 2.0 ** -53
_SMALL = 32


def splitmix64_scalar(state: int) -> tuple[int, int]:
    """Reference scalar step: returns (new_state, output)."""
    state = (state + GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return state, z ^ (z >> 31)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) & MASK64


class Rng:
    """SplitMix64 stream. Identical seed and call sequence give identical numbers."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self._state = self.seed

    def next_u64(self, n: int) -> np.ndarray:
        if n <= _SMALL:
            return np.array(self._next_small(n), dtype=np.uint64)
        counters = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self._state) + counters * np.uint64(GAMMA)
            out = _mix(z)
        self._state = (self._state + n * GAMMA) & MASK64
        return out

    def _next_small(self, n: int) -> list[int]:
        out = []
        state = self._state
        for _ in range(n):
            state, z = splitmix64_scalar(state)
            out.append(z)
        self._state = state
        return out

    def random(self, size: int | tuple | None = None) -> np.ndarray | float:
        if size is None:
            return (self._next_small(1)[0] >> 11) * _TO_UNIT
        n = size if isinstance(size, int) else math.prod(size)
        if n <= _SMALL:
            vals = np.array([(z >> 11) * _TO_UNIT for z in self._next_small(n)])
        else:
            vals = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _TO_UNIT
        return vals.reshape(size)

    def normal(self, size, loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        n = size if isinstance(size, int) else math.prod(size)
        pairs = (n + 1) // 2
        u = self.random(2 * pairs)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return (loc + scale * z[:n]).reshape(size)

    def integers(self, high: int, size=None) -> np.ndarray | int:
        if high <= 0:
            raise ValueError(f"integers() needs high > 0, got {high}")
        if size is None:
            return int(self.random() * high)
        return np.floor(self.random(size) * high).astype(np.int64)

    def choice(self, n: int, p=None) -> int:
        """Draw one index in [0, n), optionally with probabilities ``p``."""
        if p is None:
            return self.integers(n)
        cdf = np.cumsum(np.asarray(p, dtype=np.float64))
        idx = int(np.searchsorted(cdf, self.random() * cdf[-1], side="right"))
        return min(idx, n - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random(n), kind="stable")

    def sample_without_replacement(self, population, k: int) -> list:
        population = list(population)
        if k > len(population):
            raise ValueError(f"cannot draw {k} items from {len(population)}")
        order = self.permutation(len(population))
        return [population[i] for i in order[:k]]

    def fork(self, *keys) -> "Rng":
        """Independent child stream addressed by ``keys`` (ints or strings)."""
        state = self.seed
        for key in keys:
            arr = np.array([(state + _key_to_int(key) * GAMMA + GAMMA) & MASK64], dtype=np.uint64)
            with np.errstate(over="ignore"):
                state = int(_mix(arr)[0])
        return Rng(state)
