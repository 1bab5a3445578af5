"""Counter-based random streams.

Every stochastic consumer (a dropout layer, the epoch shuffler, parameter
initialization) draws from its own Philox-4x64 substream whose key is derived
from ``(seed, name, call index)`` by SHA-256.  Streams therefore do not depend
on call order across consumers, on thread scheduling, or on the platform.
"""

from __future__ import annotations

import hashlib
from collections import Counter

import numpy as np

ALGORITHM = "philox4x64-10/sha256-key"


def substream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    digest = hashlib.sha256(f"{seed}/{name}/{index}".encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


class RngState:
    """Seed plus per-name call counters."""

    algorithm = ALGORITHM

    def __init__(self, seed: int = 0):
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._calls: Counter[str] = Counter()

    def next(self, name: str) -> np.random.Generator:
        index = self._calls[name]
        self._calls[name] += 1
        return substream(self.seed, name, index)

    def reset(self) -> None:
        self._calls.clear()

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, algorithm={self.algorithm!r})"
