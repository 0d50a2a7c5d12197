from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Independent generator for a named sub-stream of the root seed.

    ``stream(7, "collection", 12)`` always yields the same numbers, regardless of
    how many other streams were drawn before it.
    """
    entropy = [int(seed), zlib.crc32(name.encode("utf-8")), *(int(i) for i in indices)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
