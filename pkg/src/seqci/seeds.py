"""Deterministic RNG substream derivation.

Every simulation unit (replication x method) draws from its own substream
seed, derived from the master seed with the mix below.  Adding a method or
reordering the run loop therefore never perturbs the draws of any other
unit, and parallel execution is bit-identical to serial execution.

The mix is splitmix64 applied to the master seed, the replication index
and an FNV-1a hash of the stream label, all in 64-bit arithmetic.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 scramble step (Steele, Lea & Flood 2014)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def fnv1a64(label: str) -> int:
    """FNV-1a hash of a string; stable across runs and platforms."""
    h = 0xCBF29CE484222325
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return h


def substream_seed(master_seed: int, rep: int, label: str) -> int:
    """64-bit seed for the (replication, label) substream of ``master_seed``."""
    s = splitmix64(master_seed & _MASK)
    s = splitmix64(s ^ ((rep & _MASK) + 0x632BE59BD9B4E019))
    return splitmix64(s ^ fnv1a64(label))


def substream_rng(master_seed: int, rep: int, label: str) -> np.random.Generator:
    """Fresh generator for the (replication, label) substream."""
    return np.random.default_rng(substream_seed(master_seed, rep, label))
