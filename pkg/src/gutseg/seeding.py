"""Deterministic RNG streams keyed by structured tuples.

Every random draw in the package goes through :func:`rng_for` so a run
is fully reproducible from one integer seed: independent streams are
derived per purpose, e.g. ``rng_for(seed, "shuffle", epoch)``.
"""
from __future__ import annotations

import zlib

import numpy as np


def _to_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    # str hash must be stable across processes (the builtin hash is salted)
    return zlib.crc32(str(part).encode("utf-8"))


def rng_for(*parts) -> np.random.Generator:
    seq = np.random.SeedSequence([_to_int(p) for p in parts])
    return np.random.Generator(np.random.PCG64(seq))
