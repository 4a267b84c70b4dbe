"""Counter-based random streams.

A stream is addressed by a tuple of integers (seed, purpose, epoch, image,
view, ...) and backed by Philox, so any stream can be regenerated on its own
without replaying the ones before it.
"""
from __future__ import annotations

import zlib

import numpy as np

# Purpose tags keep streams for different jobs disjoint.
INIT = 1
SHUFFLE = 2
VIEW = 3
PROBE = 4
PROJECTION = 5
SYNTHETIC = 6


def stream(*counter: int) -> np.random.Generator:
    """Generator that is a pure function of ``counter``."""
    words = [int(c) & 0xFFFFFFFFFFFFFFFF for c in counter]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def name_tag(name: str) -> int:
    """Stable integer for a string (parameter names, file names)."""
    return zlib.crc32(name.encode("utf-8"))
