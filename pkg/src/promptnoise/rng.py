"""Keyed, counter-based random streams.

Every stochastic draw in the package goes through :func:`generator` or
:func:`torch_generator` with a ``(seed, tag, *index)`` key, so results never
depend on call order or on how work is split across workers.
"""

from __future__ import annotations

import os
import zlib

import numpy as np
import torch

SEED_ENV = "PROMPTNOISE_SEED"


def _words(seed: int, tag: str, index) -> list[int]:
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(tag.encode())]
    words.extend(int(i) for i in index)
    return words


def key(seed: int, tag: str, *index: int) -> np.ndarray:
    """128-bit Philox key for the stream ``(seed, tag, *index)``."""
    return np.random.SeedSequence(_words(seed, tag, index)).generate_state(2, np.uint64)


def generator(seed: int, tag: str, *index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=key(seed, tag, *index)))


def derive_int(seed: int, tag: str, *index: int) -> int:
    """A 63-bit integer derived from the key, e.g. for per-image seeds."""
    return int(np.random.SeedSequence(_words(seed, tag, index)).generate_state(1, np.uint64)[0] >> 1)


def torch_generator(seed: int, tag: str, *index: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_int(seed, tag, *index))
    return g


def global_seed(default: int = 0) -> int:
    """Seed from ``$PROMPTNOISE_SEED`` if set, else ``default``."""
    value = os.environ.get(SEED_ENV)
    return int(value) if value not in (None, "") else int(default)
