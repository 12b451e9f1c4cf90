"""Deterministic named RNG substreams.

Every source of randomness in the package derives from a single integer seed
plus a short label path (e.g. ``substream(seed, "data", "codebook")``), so one
seed reproduces a whole experiment while independent stages stay decoupled.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, *labels: str) -> np.random.Generator:
    """Return a Generator for the substream named by `labels` under `seed`.

    Labels are hashed with CRC32, so streams are stable across runs and
    platforms and insensitive to the order in which other streams are used.
    """
    key = tuple(zlib.crc32(lab.encode("utf-8")) for lab in labels)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))
