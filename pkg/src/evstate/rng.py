"""Counter-based deterministic random numbers.

The event simulator needs draws that depend only on (seed, purpose, step,
pixel) so that row-partitioned parallel runs reproduce the serial run bit
for bit. A splitmix64-style hash gives a stateless generator: every value
is a pure function of its key and counter, vectorized over numpy uint64
arrays.

Sequential consumers (clip samplers, weight init, shuffling) instead get a
numpy Philox generator keyed off the same derivation scheme via
:func:`generator`.
"""

from __future__ import annotations

import hashlib

import numpy as np

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_U53 = np.float64(1.0 / (1 << 53))


def _mix(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer; input and output are uint64 (wraparound intended)."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def tag(name: str) -> int:
    """Stable 64-bit tag for a stream name, independent of PYTHONHASHSEED."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive(key: int, *words: int) -> int:
    """Fold extra words into a key, producing an independent sub-key."""
    k = np.uint64(key & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        for w in words:
            k = _mix(k ^ _mix(np.uint64(w & 0xFFFFFFFFFFFFFFFF) + _GOLDEN))
    return int(k)


def hash_u64(key: int, counter) -> np.ndarray:
    """uint64 hash of (key, counter); counter may be a scalar or uint64 array."""
    c = np.asarray(counter, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix(np.uint64(key & 0xFFFFFFFFFFFFFFFF) + _GOLDEN * (c + np.uint64(1)))


def uniform(key: int, counter) -> np.ndarray:
    """Uniform float64 in [0, 1), one value per counter."""
    return (hash_u64(key, counter) >> np.uint64(11)).astype(np.float64) * _U53


def normal(key: int, counter) -> np.ndarray:
    """Standard normal via Box-Muller; one value per counter.

    Uses two independent uniform streams derived from `key`, so counters can
    be plain element indices.
    """
    u1 = uniform(derive(key, tag("bm.u1")), counter)
    u2 = uniform(derive(key, tag("bm.u2")), counter)
    r = np.sqrt(-2.0 * np.log1p(-u1))  # log1p avoids log(0) at u1 == 0
    return r * np.cos(2.0 * np.pi * u2)


def generator(key: int, *words: int) -> np.random.Generator:
    """Philox generator for sequential draws, keyed by (key, words)."""
    return np.random.Generator(np.random.Philox(key=derive(key, *words)))
