"""
Splittable, counter-based random streams.

Every stream is a Philox generator whose seed sequence is keyed by the
experiment seed plus a path of integers (purpose, repetition, ...), so any
repetition can be regenerated in isolation and in any order.
"""
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, TypeVar, Union

import numpy as np

Key = Union[int, str]
T = TypeVar("T")

MAX_SEED = 2**64 - 1


def _key_to_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"stream keys must be non-negative, got {key}")
    return int(key)


def stream(seed: int, *keys: Key) -> np.random.Generator:
    """Return the independent generator for `(seed, *keys)`."""
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    seq = np.random.SeedSequence(entropy=seed, spawn_key=tuple(_key_to_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(seq))


def map_repetitions(fn: Callable[[int], T], repetitions: int, threads: int = 1) -> List[T]:
    """
    Evaluate `fn(r)` for r in range(repetitions), in repetition order.

    Each repetition draws from its own stream, so the result does not
    depend on `threads`.
    """
    if threads <= 1 or repetitions <= 1:
        return [fn(r) for r in range(repetitions)]
    with ThreadPoolExecutor(max_workers=threads, thread_name_prefix="repetition") as pool:
        return list(pool.map(fn, range(repetitions)))
