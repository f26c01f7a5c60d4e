"""Keyed random substreams.

Every random draw in training, sampling and data generation comes from a
stream addressed by ``(seed, purpose, step, index)``. Draws therefore never
depend on how work is batched or split across threads.
"""

from __future__ import annotations

import zlib

import numpy as np

PURPOSES = (
    "time",
    "noise",
    "label_drop",
    "data_index",
    "dataset",
    "sample_noise",
    "init",
    "extractor",
    "eval",
)


def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, step: int = 0, index: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(_purpose_code(purpose), int(step), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def per_index_normal(seed: int, purpose: str, step: int, indices, shape: tuple) -> np.ndarray:
    """Stack one standard-normal draw of ``shape`` per index (float64)."""
    return np.stack([stream(seed, purpose, step, i).standard_normal(shape) for i in indices])


def per_index_uniform(seed: int, purpose: str, step: int, indices) -> np.ndarray:
    return np.array([stream(seed, purpose, step, i).random() for i in indices])
