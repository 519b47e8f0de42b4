"""Counter-based splitmix64 random streams.

Every stochastic step in the package draws from a :class:`SplitMix64`
stream. Draw ``i`` (1-based) of a stream with state ``s`` is
``mix(s + i * GAMMA)``, so streams are vectorizable with numpy and
reproducible in any language with 64-bit wrapping arithmetic.
Child streams are derived by key with :meth:`SplitMix64.split`, which
never advances the parent.
"""

from __future__ import annotations

import numpy as np

MASK = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(z: int) -> int:
    z &= MASK
    z = ((z ^ (z >> 30)) * _M1) & MASK
    z = ((z ^ (z >> 27)) * _M2) & MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def key_hash(key) -> int:
    """FNV-1a over the UTF-8 form of ``key`` (ints hash by decimal text)."""
    h = _FNV_OFFSET
    for b in str(key).encode("utf-8"):
        h ^= b
        h = (h * _FNV_PRIME) & MASK
    return h


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK

    def split(self, *keys) -> "SplitMix64":
        s = self.state
        for k in keys:
            s = mix64(s ^ key_hash(k))
        return SplitMix64(s)

    def next_u64(self, n: int) -> np.ndarray:
        start = self.state
        self.state = (self.state + n * GAMMA) & MASK
        if n == 0:
            return np.zeros(0, dtype=np.uint64)
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            ctr = np.uint64(start) + idx * np.uint64(GAMMA)
            return _mix_array(ctr)

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) with 53 random bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def random(self) -> float:
        return float(self.uniform(1)[0])

    def normal(self, n: int) -> np.ndarray:
        # Box-Muller, one output per uniform pair.
        u = self.uniform(2 * n)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """Integers in [low, high)."""
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        span = high - low
        out = np.floor(self.uniform(n) * span).astype(np.int64)
        return np.minimum(out, span - 1) + low

    def randint(self, low: int, high: int) -> int:
        """Single integer in [low, high] inclusive."""
        return int(self.integers(low, high + 1, 1)[0])

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def sample(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, in draw order."""
        return self.permutation(n)[:k]

    def bernoulli(self, p) -> np.ndarray:
        """One coin per entry of ``p``."""
        p = np.atleast_1d(np.asarray(p, dtype=np.float64))
        return self.uniform(p.size) < p
