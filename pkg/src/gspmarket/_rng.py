"""Seeded random streams.

Every stochastic routine takes either a ``numpy.random.Generator`` or an
integer seed.  Child streams are derived with ``SeedSequence`` so that a
(master seed, key...) tuple always maps to the same stream, regardless of
which worker evaluates it.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


def stream(seed, *keys) -> np.random.Generator:
    """Generator for the stream identified by ``(seed, *keys)``."""
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
