"""Deterministic 64-bit seed derivation.

Every random stream in the package is keyed by a seed derived from a master
seed through `mix`, a splitmix64 finalizer over the running hash of the
arguments. Stage names are folded in bytewise so that e.g. ("anchor", fold 0)
and ("lns", fold 0) give unrelated streams.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(x: np.uint64) -> np.uint64:
    with np.errstate(over="ignore"):
        z = np.uint64(x) + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def mix(master: int, *parts: int | str) -> int:
    """Derive an independent 64-bit stream seed from a master seed and tags.

    Integer parts are folded in directly, strings bytewise. The same
    (master, parts) always yields the same seed; distinct tags decorrelate.
    """
    h = np.uint64(master & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        for part in parts:
            if isinstance(part, str):
                for byte in part.encode("utf-8"):
                    h = _splitmix64(h ^ np.uint64(byte))
            else:
                h = _splitmix64(h ^ np.uint64(int(part) & 0xFFFFFFFFFFFFFFFF))
    return int(_splitmix64(h))


def rng_for(master: int, *parts: int | str) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by mix(master, *parts)."""
    return np.random.Generator(np.random.Philox(key=mix(master, *parts)))
