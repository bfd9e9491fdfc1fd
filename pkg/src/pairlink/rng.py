"""Named, splittable random streams.

Every random draw in the package comes from a Philox (counter-based) generator
whose key is derived from an integer seed plus a path of names, e.g.
``stream(seed, "chsh", 2, "clock", "bob")``.  Identical paths give identical
sequences on every platform; distinct paths are statistically independent.
"""
from __future__ import annotations

import zlib

import numpy as np


def _word(part: object) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *names: object) -> np.random.Generator:
    """Return the generator for ``seed`` and the given name path."""
    if seed is None:
        raise ValueError("a seed is required; wall-clock seeding is not supported")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_word(n) for n in names))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *names: object) -> int:
    """A 63-bit integer seed for a named child (for configs that store seeds)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_word(n) for n in names))
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))
