"""A small vectorised Bloom filter over 64-bit float values."""
from __future__ import annotations

import math

import numpy as np

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix(x: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser
    with np.errstate(over="ignore"):
        x = x + _GOLDEN
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
        return x ^ (x >> np.uint64(31))


def _keys(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    v = np.where(v == 0, 0.0, v)  # -0.0 and 0.0 hash alike
    return v.view(np.uint64)


class BloomFilter:
    """Standard Bloom filter sized for ``n_expected`` items at ``target_fpr``.

    Uses m = -n ln(p) / ln(2)^2 bits and k = round(m/n ln 2) hashes derived
    by double hashing.
    """

    def __init__(self, n_expected: int, target_fpr: float = 0.01):
        if not 0.0 < target_fpr < 1.0:
            raise ValueError("target_fpr must lie in (0, 1)")
        n = max(int(n_expected), 1)
        self.target_fpr = target_fpr
        self.m = max(8, int(math.ceil(-n * math.log(target_fpr) / math.log(2) ** 2)))
        self.k = max(1, int(round(self.m / n * math.log(2))))
        self.bits = np.zeros(self.m, dtype=bool)
        self.count = 0

    def _positions(self, keys: np.ndarray) -> np.ndarray:
        h1 = _mix(keys)
        h2 = _mix(keys ^ _M2) | np.uint64(1)
        i = np.arange(self.k, dtype=np.uint64)
        with np.errstate(over="ignore"):
            pos = h1[:, None] + i[None, :] * h2[:, None]
        return (pos % np.uint64(self.m)).astype(np.int64)

    def add(self, values) -> None:
        keys = _keys(values)
        if keys.size == 0:
            return
        self.bits[self._positions(keys).ravel()] = True
        self.count += keys.size

    def probe_many(self, values) -> np.ndarray:
        keys = _keys(values)
        if keys.size == 0 or self.count == 0:
            return np.zeros(keys.size, dtype=bool)
        return self.bits[self._positions(keys)].all(axis=1)

    def __contains__(self, value) -> bool:
        return bool(self.probe_many([value])[0])


def bloom_build(values, target_fpr: float = 0.01, include_zeros: bool = False) -> BloomFilter:
    """Filter over the distinct values; zeros are left out unless
    ``include_zeros`` is set."""
    if not 0.0001 < target_fpr < 0.5:
        raise ValueError("target_fpr must lie in (0.0001, 0.5)")
    v = np.unique(np.asarray(values, dtype=np.float64).ravel())
    if not include_zeros:
        v = v[v != 0]
    bf = BloomFilter(len(v), target_fpr)
    bf.add(v)
    return bf


def bloom_probe(bf: BloomFilter, v) -> bool:
    return v in bf
