"""Named, coordinate-keyed random streams.

Every consumer (parameter init, batching, noise, ...) draws from its own
stream keyed by ``(seed, stream name, *coordinates)``, so any component can
be re-run in isolation and no draw is shared between coordinates.
"""
from __future__ import annotations

import zlib

import numpy as np


def _word(x) -> int:
    if isinstance(x, (int, np.integer)):
        if x < 0:
            raise ValueError("stream coordinates must be non-negative")
        return int(x)
    return zlib.crc32(str(x).encode("utf-8"))


def stream(seed: int, name: str, *coords) -> np.random.Generator:
    """Philox generator for ``name`` at ``coords`` under master ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(_word(name), *(_word(c) for c in coords)))
    key = ss.generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, *coords) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_word(c) for c in coords))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
