"""Portable seeded random streams.

Every draw is derived from the raw 64-bit output of Philox4x64-10 keyed with
``(seed, stream)`` and a zero starting counter.  The transforms from raw words
to distributions are defined here rather than delegated to numpy's
``Generator`` methods, so a given seed yields the same values on any platform
and in any implementation that reproduces these rules:

* uniform:      ``(w >> 11) * 2**-53``                      -> [0, 1)
* normal:       Box-Muller on consecutive uniform pairs
                ``r = sqrt(-2 ln(1 - u1))``; emits ``r cos(2 pi u2)``
                then ``r sin(2 pi u2)``
* rademacher:   top bit of each word, ``+1`` if set else ``-1``
* categorical:  one uniform ``u`` per draw, smallest ``k`` with ``cdf[k] > u``
* permutation:  stable argsort of ``n`` uniform keys
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_INV_2_53 = 1.0 / (1 << 53)


class Rng:
    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key, counter=0)

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bitgen.random_raw(int(n)), dtype=np.uint64).reshape(-1)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None, mean: float = 0.0, std: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        z = mean + std * z[:n]
        return float(z[0]) if size is None else z.reshape(size)

    def rademacher(self, size) -> np.ndarray:
        n = int(np.prod(size))
        bits = (self.raw(n) >> np.uint64(63)).astype(np.float64)
        return (2.0 * bits - 1.0).reshape(size)

    def categorical(self, probs, size=None):
        p = np.asarray(probs, dtype=np.float64)
        cdf = np.cumsum(p)
        cdf /= cdf[-1]
        n = 1 if size is None else int(np.prod(size))
        u = self.uniform(n)
        idx = np.searchsorted(cdf, u, side="right")
        idx = np.minimum(idx, len(p) - 1)
        return int(idx[0]) if size is None else idx.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(int(n)), kind="stable")

    def integers(self, high: int, size=None):
        """Uniform integers in ``[0, high)``; float-based, fine for high << 2**53."""
        u = self.uniform(size)
        return np.minimum((np.asarray(u) * high).astype(np.int64), high - 1) if size is not None \
            else min(int(u * high), high - 1)

    def fork(self, stream: int) -> "Rng":
        """Independent stream sharing this seed."""
        return Rng(self.seed, stream)


def seeded_rng(seed: int, stream: int = 0) -> Rng:
    return Rng(seed, stream)
