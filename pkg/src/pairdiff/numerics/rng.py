"""Counter-based random streams.

A stream is addressed by a master seed plus a tuple of integer or string
ids; the same address always yields the same Philox generator, regardless
of what other streams were drawn from or in which order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def stream(seed: int, *ids) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(i) for i in ids))
    return np.random.Generator(np.random.Philox(ss))


def normal(seed: int, *ids, shape, dtype=np.float32) -> np.ndarray:
    return stream(seed, *ids).standard_normal(shape, dtype=np.float64).astype(dtype)
