"""Named random streams derived from a single scenario seed.

Every consumer draws from ``stream(seed, name, *index)``: the seed is the
entropy and the name/indices form the spawn key, so streams are independent
of each other and of the order in which they are created. Splitting work
across processes therefore cannot change any draw.

Stream names in use: ``"sample"`` (manifold sampling), ``"validate"``,
``"search-J"`` and ``"search-lambda", J`` (multistart per active set), ``"census", J``,
``"fiber", level`` and ``"frontier"``.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    if isinstance(part, float):
        return zlib.crc32(repr(part).encode())
    if isinstance(part, (tuple, list, frozenset)):
        return zlib.crc32(",".join(str(p) for p in part).encode())
    return zlib.crc32(str(part).encode())


def stream(seed: int, *key) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(_key(k) for k in key))
    return np.random.default_rng(ss)
