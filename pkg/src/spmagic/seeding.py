"""Root-seed splitting so every pipeline stage has its own reproducible stream."""

from __future__ import annotations

import zlib

import numpy as np


def stage_seed(seed: int, stage: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stage.encode())])


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Generator for ``stage`` derived from the root ``seed``."""
    return np.random.default_rng(stage_seed(seed, stage))
