#!/usr/bin/env python3
"""Deterministic random streams.

Every random draw in pcdlib goes through :class:`SplitMix64`, a counter-based
64-bit generator. Gaussian samples use the Box-Muller transform on pairs of
consecutive uniforms. Streams are derived from a master seed and a key
(consumer name plus indices such as epoch/step/sample), so results never
depend on the order in which consumers draw.
"""

import hashlib
import math
from typing import Sequence, Union

import numpy as np

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_2 = np.uint64(0x94D049BB133111EB)
_TWO_POW_M53 = 1.0 / float(1 << 53)

Key = Union[str, int]


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX_1
        z = (z ^ (z >> np.uint64(27))) * _MIX_2
        return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based splitmix64 generator.

    The i-th output is ``mix(seed + (i + 1) * GOLDEN_GAMMA)``; drawing ``n``
    values advances the counter by ``n``.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0

    def next_uint64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            states = np.uint64(self.seed) + idx * GOLDEN_GAMMA
        return _mix(states)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 samples in [0, 1) with 53 bits of resolution."""
        return (self.next_uint64(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53

    def gaussian(self, n: int) -> np.ndarray:
        """``n`` standard normal float64 samples (Box-Muller on uniform pairs)."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # in (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integers(self, low: int, high: int, n: int = 1) -> np.ndarray:
        """``n`` integers drawn uniformly from [low, high)."""
        if high <= low:
            return np.full(n, low, dtype=np.int64)
        span = high - low
        return low + np.minimum((self.uniform(n) * span).astype(np.int64), span - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def bernoulli(self, p: float) -> bool:
        return bool(self.uniform(1)[0] < p)

    def between(self, bounds: Sequence[float]) -> float:
        lo, hi = float(bounds[0]), float(bounds[1])
        if hi <= lo:
            return lo
        return lo + (hi - lo) * float(self.uniform(1)[0])


def derive_seed(master_seed: int, *keys: Key) -> int:
    """Stable 64-bit seed for ``keys`` under ``master_seed``."""
    h = hashlib.blake2b(digest_size=8)
    h.update((int(master_seed) & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little", signed=False))
    for key in keys:
        h.update(b"\x1f")
        h.update(str(key).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class RngStreams:
    """Factory of independent :class:`SplitMix64` streams under one master seed.

    ``streams.derive("augment", step, image_id, view)`` always returns the same
    stream for the same key, regardless of what else has been drawn.
    """

    def __init__(self, master_seed: int) -> None:
        self.master_seed = int(master_seed)

    def derive(self, *keys: Key) -> SplitMix64:
        return SplitMix64(derive_seed(self.master_seed, *keys))
