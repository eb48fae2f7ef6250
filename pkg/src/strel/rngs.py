"""Counter-based deterministic RNG streams.

Every random draw in the package comes from a stream keyed by a user seed
plus a tuple of purpose tags (strings and counters).  Identical keys yield
identical streams, so exact resume needs no serialized RNG state: the seed
and the iteration counters are the state.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1
_MASK32 = (1 << 32) - 1


def _tag_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    return zlib.crc32(str(tag).encode("utf-8")) & _MASK32


def stream(seed: int, *tags) -> np.random.Generator:
    """Generator for the stream keyed by ``(seed, *tags)``."""
    entropy = [int(seed) & _MASK64] + [_tag_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
