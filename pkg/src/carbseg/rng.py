"""Counter-based random streams keyed by (seed, purpose, keys).

Every random draw in carbseg comes from a Philox generator whose key is
derived from the run seed, a purpose string, and integer or string keys
(scene id, iteration, view key). Two streams with different keys never
share state, so the order in which scenes or views are processed cannot
change any draw.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _word(key: int | str) -> int:
    if isinstance(key, bool):
        return int(key)
    if isinstance(key, int):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return key
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")


def stream(seed: int, purpose: str, *keys: int | str) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, purpose, *keys)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    sequence = np.random.SeedSequence(
        entropy=seed, spawn_key=(_word(purpose), *(_word(k) for k in keys))
    )
    return np.random.Generator(np.random.Philox(sequence))

