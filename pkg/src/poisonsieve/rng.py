"""Seeded, splittable random number generation.

Every random draw in the package flows through streams derived here, so a
single master seed pins the whole pipeline: dataset synthesis, weight init,
shuffling, poison slot selection, crafting restarts. Streams are identified
by a label plus optional integer indices; the derivation is a SplitMix64
chain over the label bytes, so distinct labels give statistically independent
PCG64 states and the mapping is stable across platforms and runs.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def derive_key(seed: int, *path: str | int) -> int:
    """Mix a master seed with a stream path into a single 64-bit key."""
    state = seed & _MASK
    for part in path:
        data = part.to_bytes(8, "little", signed=True) if isinstance(part, int) else part.encode()
        for byte in data:
            state, _ = _splitmix64(state ^ byte)
    state, key = _splitmix64(state)
    return key


def stream(seed: int, *path: str | int) -> np.random.Generator:
    """A fresh generator for the stream identified by (seed, *path)."""
    return np.random.Generator(np.random.PCG64(derive_key(seed, *path)))
