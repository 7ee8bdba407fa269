"""Counter-based dropout masks.

The keep/drop decision for an element depends only on (seed, dropout key,
global flat element index), so a rank that holds a slice of a tensor draws
exactly the bits the full tensor would have drawn at those positions.
"""
from __future__ import annotations

import hashlib
from functools import lru_cache

import numpy as np


def key_hash(key: str) -> int:
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")


@lru_cache(maxsize=64)
def _stream(seed: int, key: str, total: int) -> np.ndarray:
    # Philox is counter based: position i of the raw stream is a pure
    # function of the 128-bit key and i.
    gen = np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, key_hash(key)])
    raw = gen.random_raw(total)
    u = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    u.setflags(write=False)
    return u


def uniforms(seed: int, key: str, gidx: np.ndarray) -> np.ndarray:
    gidx = np.asarray(gidx, dtype=np.int64)
    if gidx.size == 0:
        return np.zeros(gidx.shape)
    return _stream(int(seed), key, int(gidx.max()) + 1)[gidx]


def keep_mask(seed: int, key: str, rate: float, gidx: np.ndarray) -> np.ndarray:
    return uniforms(seed, key, gidx) >= rate
