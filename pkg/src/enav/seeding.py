"""Seed derivation and counter-based uniforms.

All randomness used during decoding is a pure function of
``(episode seed, clock, purpose, position)``, so an episode replays the same
draws regardless of which other episodes share its batch.
"""
from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *path: int | str) -> int:
    """Child seed for a named component: fold each path element through splitmix64.

    Strings are reduced with CRC32 so the mapping is stable across processes.
    """
    s = int(master) & MASK64
    for part in path:
        v = zlib.crc32(part.encode()) if isinstance(part, str) else int(part) & MASK64
        s = splitmix64(s ^ v)
    return s


def _splitmix64_np(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(_GOLDEN)
    z = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def counter_uniforms(seeds, clocks, purpose: int, n: int) -> np.ndarray:
    """(B, n) uniforms in [0, 1) keyed by per-row seed and clock."""
    seeds = np.asarray(seeds, dtype=np.uint64).reshape(-1, 1)
    clocks = np.asarray(clocks, dtype=np.uint64).reshape(-1, 1)
    pos = np.arange(n, dtype=np.uint64).reshape(1, -1)
    with np.errstate(over="ignore"):
        k = _splitmix64_np(seeds)
        k = _splitmix64_np(k ^ clocks)
        k = _splitmix64_np(k ^ np.uint64(purpose))
        k = _splitmix64_np(k ^ pos)
    return (k >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
