"""
Seed Splitting
Every sub-experiment draws from its own stream derived from the single --seed flag

Scheme: child_rng(seed, *keys) = default_rng(SeedSequence(entropy=seed, spawn_key=keys)).
The first key names the stream (see STREAM_*), later keys index prompts
(by content_key of their tokens), repeats, steps or shards. Streams with
different key tuples are statistically independent, so results never depend
on the order in which workers consume them.
"""

import hashlib
from typing import Sequence, Tuple

import numpy as np

STREAM_SYNTH = 1
STREAM_INIT = 2
STREAM_TRAIN = 3
STREAM_HELDOUT = 4
STREAM_SKIPLAYER = 5
STREAM_LENS = 6
STREAM_SCORE = 7


def seed_sequence(seed: int, *keys: int) -> np.random.SeedSequence:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))


def child_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, keys)"""
    return np.random.default_rng(seed_sequence(seed, *keys))


def child_seed(seed: int, *keys: int) -> int:
    """A 63-bit integer seed for (seed, keys), for APIs that take plain ints"""
    state: Tuple[int, ...] = tuple(seed_sequence(seed, *keys).generate_state(2, dtype=np.uint32))
    return (int(state[0]) << 31) ^ int(state[1])


def content_key(token_ids: Sequence[int]) -> int:
    """A 32-bit key derived from a token sequence, stable across prompt sets and orderings"""
    digest = hashlib.sha256(np.asarray(token_ids, dtype='<i8').tobytes()).digest()
    return int.from_bytes(digest[:4], 'little')
