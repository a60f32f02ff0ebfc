"""Counter-based deterministic random utilities.

Everything stochastic in the pipeline is keyed explicitly: a 64-bit seed is
folded together with integer/string tags (epoch, sample id, token index, ...)
through the SplitMix64 finalizer, so any draw can be reproduced from its key
alone, independent of execution order or worker count.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """SplitMix64 finalizer: a bijective avalanche over 64-bit integers."""
    z = (z + _GAMMA) & _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, *parts: int | str) -> int:
    """Fold ``parts`` into ``seed``, producing a decorrelated child seed."""
    z = mix64(seed & _MASK)
    for part in parts:
        if isinstance(part, str):
            for byte in part.encode("utf-8"):
                z = mix64(z ^ byte)
        else:
            z = mix64(z ^ (int(part) & _MASK))
    return z


def counter_uniform(seed: int, *parts: int | str) -> float:
    """One uniform draw in [0, 1) fully determined by (seed, parts)."""
    return (derive_seed(seed, *parts) >> 11) * (1.0 / (1 << 53))


def uniform_array(seed: int, indices: np.ndarray) -> np.ndarray:
    """Vectorized ``counter_uniform(seed, i)`` for an int array of indices.

    Matches the scalar path bit for bit; used where one score per token is
    needed without a Python loop.
    """
    z = np.uint64(mix64(seed & _MASK))
    x = indices.astype(np.uint64) & np.uint64(_MASK)
    with np.errstate(over="ignore"):
        z = z ^ x
        z = (z + np.uint64(_GAMMA)) & np.uint64(_MASK)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def generator(seed: int, *parts: int | str) -> np.random.Generator:
    """A numpy Generator seeded from the derived key (PCG64)."""
    return np.random.default_rng(derive_seed(seed, *parts))
