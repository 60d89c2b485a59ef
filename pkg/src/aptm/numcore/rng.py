"""Counter-based, splittable random streams.

Every stochastic site (init, masking, sampling, shuffling, flips) draws from
its own stream, keyed by ``(seed, stream_id, *counter)``. Philox is counter
based, so a stream for step ``n`` can be rebuilt without replaying steps
``0..n-1``; this is what makes resumed runs bit-identical.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np


def stream_id(name: str) -> int:
    """Stable 32-bit id for a named stream (crc32 is platform independent)."""
    return zlib.crc32(name.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int

    @classmethod
    def named(cls, seed: int, name: str) -> "RngStream":
        return cls(int(seed), stream_id(name))

    def generator(self, *counter: int) -> np.random.Generator:
        key = (int(self.stream_id) & 0xFFFFFFFFFFFFFFFF,) + tuple(int(c) for c in counter)
        seq = np.random.SeedSequence(int(self.seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
        return np.random.Generator(np.random.Philox(seq))

    def child(self, name: str) -> "RngStream":
        return RngStream(self.seed, stream_id(f"{self.stream_id}/{name}"))
