"""Deterministic seed derivation.

Every stochastic component draws from a numpy Generator whose seed is
derived from a master seed plus a path of labels, so that independent
streams never alias and whole experiments replay bit-identically from a
single integer.
"""
from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer (public-domain constants)."""
    x = (x + _GOLDEN) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def _fnv1a(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


def derive(seed: int, *parts: int | str) -> int:
    """Mix ``seed`` with a label path into a new 64-bit seed.

    Labels may be ints or strings; the same path always yields the same
    result and distinct paths decorrelate under splitmix64.
    """
    h = seed & _MASK
    if not parts:
        return splitmix64(h)
    for part in parts:
        if isinstance(part, str):
            p = _fnv1a(part)
        else:
            p = int(part) & _MASK
        h = splitmix64(h ^ p)
    return h


def rng_from(seed: int, *parts: int | str) -> np.random.Generator:
    """A PCG64 Generator seeded from ``derive(seed, *parts)``."""
    return np.random.Generator(np.random.PCG64(derive(seed, *parts)))
