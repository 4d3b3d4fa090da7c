"""Seed derivation.

Every random draw in the package goes through a generator derived from a
root seed plus a path of string/int keys, so independent consumers never
share a stream and adding a consumer never shifts another one's draws.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _key_to_int(key: str | int) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


def seed_sequence(seed: int, *keys: str | int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))


def derive_seed(seed: int, *keys: str | int) -> int:
    """A 63-bit integer seed for the stream named by ``keys`` under ``seed``."""
    return int(seed_sequence(seed, *keys).generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> 1)


def numpy_rng(seed: int, *keys: str | int) -> np.random.Generator:
    # Philox is counter-based, so streams are cheap to split and reproducible.
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *keys)))


def torch_generator(seed: int, *keys: str | int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *keys))
    return g
