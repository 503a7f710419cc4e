"""Counter-based random streams keyed by (seed, purpose, index...)."""

from __future__ import annotations

import hashlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key(part: Key) -> int:
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_stream(seed: int, *keys: Key) -> np.random.Generator:
    """Independent Philox generator; the same (seed, keys) always yields the same draws."""
    sequence = np.random.SeedSequence(entropy=_key(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(sequence))
