"""Named random streams split from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream_seed(root: int, name: str, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root), zlib.crc32(name.encode()), *map(int, extra)])


def stream(root: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for subsystem ``name``; changing one stream never shifts another."""
    return np.random.default_rng(stream_seed(root, name, *extra))


def child_seed(root: int, name: str, *extra: int) -> int:
    return int(stream_seed(root, name, *extra).generate_state(1, np.uint32)[0])
