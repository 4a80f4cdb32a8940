"""Seed derivation shared by every stochastic routine.

A seed is either a non-negative int or a tuple of non-negative ints.  Child
seeds are formed by appending integer keys, so the stream used by outer
iteration ``k`` of a simulation is a pure function of ``(seed, k)`` and does
not depend on execution order or thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar, Union

import numpy as np

Seed = Union[int, Sequence[int]]

T = TypeVar("T")
R = TypeVar("R")


def as_key(seed: Seed) -> tuple[int, ...]:
    if isinstance(seed, (int, np.integer)):
        key = (int(seed),)
    else:
        key = tuple(int(s) for s in seed)
    if not key or any(k < 0 for k in key):
        raise ValueError(f"seed must be a non-negative int or tuple of ints, got {seed!r}")
    return key


def derive(seed: Seed, *keys: int) -> tuple[int, ...]:
    return as_key(seed) + tuple(int(k) for k in keys)


def stream(seed: Seed, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(derive(seed, *keys))))


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Map ``fn`` over ``items`` keeping input order regardless of ``threads``."""
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
