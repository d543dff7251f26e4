"""Deterministic seed derivation: independent streams from (master seed, keys)."""
from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("seed keys must be non-negative")
        return int(k)
    return zlib.crc32(str(k).encode("utf-8"))


def derive_seed(master: int, *keys) -> int:
    """A 63-bit seed for the stream named by ``keys`` under ``master``."""
    seq = np.random.SeedSequence(entropy=_key(master), spawn_key=tuple(_key(k) for k in keys))
    hi, lo = (int(v) for v in seq.generate_state(2, dtype=np.uint32))
    return ((hi & 0x7FFFFFFF) << 32) | lo


def rng_for(master: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
