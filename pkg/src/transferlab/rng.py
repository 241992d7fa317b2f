"""Seed-stream derivation.

All randomness in the toolkit flows through named streams derived from a
single integer seed, so that consumers (weight init, epoch shuffling,
dropout, dataset noise, ...) never share or disturb each other's state.
"""
from __future__ import annotations

import hashlib

import numpy as np

# Stable stream tags. New tags may be appended; existing values must never
# change or previously recorded runs stop being reproducible.
INIT = 1
SHUFFLE = 2
DROPOUT = 3
DATA_TRAIN = 4
DATA_VAL = 5
SPLIT = 6
REDUCE = 7
CHECK = 8


def _entropy(keys) -> list[int]:
    words = []
    for k in keys:
        if isinstance(k, str):
            # Stable across processes, unlike hash().
            digest = hashlib.sha256(k.encode("utf-8")).digest()
            words.append(int.from_bytes(digest[:8], "little"))
        else:
            words.append(int(k) & 0xFFFFFFFFFFFFFFFF)
    return words


def stream(*keys: int | str) -> np.random.Generator:
    """Return a fresh generator for the stream named by ``keys``."""
    return np.random.default_rng(np.random.SeedSequence(_entropy(keys)))


def derive_seed(*keys: int | str) -> int:
    """Collapse a key tuple into a single 32-bit seed (for provenance rows)."""
    return int(np.random.SeedSequence(_entropy(keys)).generate_state(1)[0])
