"""Named random substreams derived from one 64-bit seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream_seed(seed: int, name: str, index: int = 0) -> int:
    """Deterministic 63-bit seed for the substream ``name`` (and optional ``index``)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFF_FFFF_FFFF_FFFF, zlib.crc32(name.encode()), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def substream_rng(seed: int, name: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name, index))
