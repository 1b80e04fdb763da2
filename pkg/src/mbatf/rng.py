"""Named random sub-streams derived from one run seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Generator for stream `name` (optionally indexed, e.g. by task number)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, index)])
