"""Seeded 64-bit random number generation.

Determinism of every pipeline stage is part of the package contract, so all
randomness flows through this module instead of numpy's generators: a
splitmix64 stream feeding uniform doubles and Box-Muller normals. The stream
is a pure function of the 64-bit seed and is stable across platforms and
library versions. Generator state is a single integer, cheap to checkpoint.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = 0xFFFFFFFFFFFFFFFF


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def derive_seed(base_seed: int, index: int) -> int:
    """Mix a base seed with a stream index into an independent 64-bit seed."""
    with np.errstate(over="ignore"):
        z = np.uint64(base_seed & _U64_MASK) + _GOLDEN * np.uint64((index + 1) & _U64_MASK)
        return int(_mix(np.uint64(z & np.uint64(_U64_MASK))))


class Rng:
    """splitmix64 stream with uniform, normal, integer and shuffle draws."""

    def __init__(self, seed: int):
        self._state = np.uint64(seed & _U64_MASK)

    @property
    def state(self) -> int:
        return int(self._state)

    def set_state(self, state: int) -> None:
        self._state = np.uint64(state & _U64_MASK)

    def _next_block(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            raw = self._state + steps * _GOLDEN
            self._state = self._state + np.uint64(n) * _GOLDEN
            return _mix(raw)

    def uniform(self, size=None) -> np.ndarray | float:
        """Uniform float64 draws in [0, 1)."""
        n = 1 if size is None else int(np.prod(size))
        vals = (self._next_block(n) >> np.uint64(11)) * (2.0 ** -53)
        if size is None:
            return float(vals[0])
        return vals.reshape(size)

    def normal(self, size=None) -> np.ndarray | float:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0,1] keeps log finite
        theta = (2.0 * np.pi) * u2
        vals = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        if size is None:
            return float(vals[0])
        return vals.reshape(size)

    def randint(self, low: int, high: int, size=None):
        """Integer draws uniform over {low, ..., high-1}."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        span = high - low
        vals = np.floor(self.uniform(size if size is not None else 1) * span).astype(np.int64) + low
        if size is None:
            return int(vals[0])
        return vals

    def shuffled(self, n: int) -> np.ndarray:
        """Deterministic Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.randint(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
