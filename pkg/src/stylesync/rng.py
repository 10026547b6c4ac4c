"""Seeded random streams with documented splitting.

Every stochastic component draws from a stream identified by
``(root seed, purpose tag, index)``.  The triple is folded into a single
64-bit child seed with SplitMix64, and the child seed drives a numpy
PCG64 generator for bulk sampling.  Reruns with the same triple produce
identical bytes; streams with different tags or indices are independent.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, (z ^ (z >> 31)) & _MASK64


def _fold(state: int, word: int) -> int:
    state = (state ^ (word & _MASK64)) & _MASK64
    state, out = splitmix64(state)
    return out


def child_seed(seed: int, tag: str, index: int = 0) -> int:
    """Derive the 64-bit child seed for stream (seed, tag, index)."""
    state = _fold(0, seed)
    for byte in tag.encode("utf-8"):
        state = _fold(state, byte)
    return _fold(state, index)


def stream(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Generator for the (seed, tag, index) stream."""
    return np.random.Generator(np.random.PCG64(child_seed(seed, tag, index)))
