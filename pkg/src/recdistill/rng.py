"""Counter-based seed splitting: one master seed, independent named streams."""

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Generator for the stream ``(seed, *keys)``; e.g. ``derive_rng(7, "mask", 12)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *map(_key, keys)]))
