"""Philox4x32-10 counter-based generator and the derived samplers.

The byte-level contract lives in ``docs/prng.md``; summary:

* key = (seed & 0xFFFFFFFF, seed >> 32) for a 64-bit seed,
* block ``i`` is the 10-round Philox4x32 bijection of counter
  ``(i & 0xFFFFFFFF, i >> 32, stream & 0xFFFFFFFF, stream >> 32)``,
* the word stream is block 0 words 0..3, block 1 words 0..3, ...,
* a standard normal pair consumes two words ``a, b``:
  ``u1 = (a + 1) / 2**32``, ``u2 = b / 2**32``,
  ``z0 = sqrt(-2 ln u1) cos(2 pi u2)``, ``z1 = sqrt(-2 ln u1) sin(2 pi u2)``
  evaluated in float64,
* a bounded integer in ``[0, n)`` consumes one word ``a``: ``(a * n) >> 32``.

``stream`` separates independent uses of one seed (dataset noise, weight
init, batch order, ...) without sharing counters.
"""

from __future__ import annotations

import numpy as np

PHILOX_M0 = 0xD2511F53
PHILOX_M1 = 0xCD9E8D57
PHILOX_W0 = 0x9E3779B9
PHILOX_W1 = 0xBB67AE85
ROUNDS = 10

_M32 = np.uint64(0xFFFFFFFF)


def _mulhilo(a: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    prod = a.astype(np.uint64) * np.uint64(m)
    return (prod >> np.uint64(32)).astype(np.uint32), (prod & _M32).astype(np.uint32)


def philox4x32(counters: np.ndarray, key: tuple[int, int]) -> np.ndarray:
    """Apply Philox4x32-10 to an ``(n, 4)`` uint32 counter array."""
    c = np.asarray(counters, dtype=np.uint32)
    c0, c1, c2, c3 = (c[:, j].copy() for j in range(4))
    k0, k1 = np.uint32(key[0]), np.uint32(key[1])
    for r in range(ROUNDS):
        if r:
            k0 = np.uint32((int(k0) + PHILOX_W0) & 0xFFFFFFFF)
            k1 = np.uint32((int(k1) + PHILOX_W1) & 0xFFFFFFFF)
        hi0, lo0 = _mulhilo(c0, PHILOX_M0)
        hi1, lo1 = _mulhilo(c2, PHILOX_M1)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return np.stack([c0, c1, c2, c3], axis=1)


class CounterRNG:
    """Sequential reader over the Philox word stream of ``(seed, stream)``."""

    def __init__(self, seed: int, stream: int = 0):
        seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.seed = seed
        self.stream = int(stream) & 0xFFFF_FFFF_FFFF_FFFF
        self._key = (seed & 0xFFFFFFFF, seed >> 32)
        self._word = 0  # index of the next unread word

    @property
    def position(self) -> int:
        return self._word

    def words(self, n: int) -> np.ndarray:
        """Next ``n`` uint32 words."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint32)
        first_block = self._word // 4
        last_block = (self._word + n - 1) // 4
        blocks = np.arange(first_block, last_block + 1, dtype=np.uint64)
        ctr = np.empty((blocks.size, 4), dtype=np.uint32)
        ctr[:, 0] = (blocks & _M32).astype(np.uint32)
        ctr[:, 1] = (blocks >> np.uint64(32)).astype(np.uint32)
        ctr[:, 2] = self.stream & 0xFFFFFFFF
        ctr[:, 3] = self.stream >> 32
        out = philox4x32(ctr, self._key).reshape(-1)
        start = self._word - first_block * 4
        self._word += n
        return out[start:start + n]

    def uniform(self, n: int) -> np.ndarray:
        """float64 uniforms in [0, 1), one word each."""
        return self.words(n).astype(np.float64) / 4294967296.0

    def normal(self, n: int) -> np.ndarray:
        """float64 standard normals via Box-Muller, two words per pair."""
        pairs = (n + 1) // 2
        w = self.words(2 * pairs).astype(np.float64)
        u1 = (w[0::2] + 1.0) / 4294967296.0
        u2 = w[1::2] / 4294967296.0
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = rad * np.cos(2.0 * np.pi * u2)
        z[1::2] = rad * np.sin(2.0 * np.pi * u2)
        return z[:n]

    def below(self, bounds) -> np.ndarray:
        """One integer in ``[0, bounds[j])`` per entry, one word each."""
        b = np.asarray(bounds, dtype=np.uint64)
        if b.size and (b.min() < 1 or b.max() > 0xFFFFFFFF):
            raise ValueError("bounds must be in [1, 2**32 - 1]")
        w = self.words(b.size).astype(np.uint64)
        return ((w * b) >> np.uint64(32)).astype(np.int64)

    def sample(self, population: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(population)``, in draw order.

        Partial Fisher-Yates: step ``j`` swaps slot ``j`` with slot
        ``j + below(population - j)``.
        """
        if not 0 <= k <= population:
            raise ValueError(f"cannot draw {k} distinct items from {population}")
        offsets = self.below(np.arange(population, population - k, -1))
        swapped: dict[int, int] = {}
        out = np.empty(k, dtype=np.int64)
        for j, off in enumerate(offsets.tolist()):
            t = j + off
            vt = swapped.get(t, t)
            swapped[t] = swapped.get(j, j)
            out[j] = vt
        return out

    def permutation(self, n: int) -> np.ndarray:
        return self.sample(n, n)
