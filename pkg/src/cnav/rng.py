"""Named random sub-streams derived from one master seed.

Every source of randomness in the package (scene generation, episode
generation, parameter init, batch shuffling, k-means, buffer sampling)
draws from its own named stream so that components can be re-seeded and
re-run independently without perturbing each other.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    """Stable 32-bit key for a stream name (crc32, platform independent)."""
    return zlib.crc32(name.encode("utf-8"))


def substream(master_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for the stream ``name`` with optional integer indices.

    The same (master_seed, name, indices) always yields a bit-identical
    generator; distinct names or indices yield independent streams.
    """
    if master_seed < 0:
        raise ValueError("master_seed must be non-negative")
    ss = np.random.SeedSequence([master_seed, stream_key(name), *indices])
    return np.random.Generator(np.random.PCG64(ss))
