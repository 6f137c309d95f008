"""Deterministic random streams derived from a single 64-bit master seed.

Every stream is identified by ``(master, role, replica)``. The stream id is

    stream_id = SeedSequence(entropy=master, spawn_key=(crc32(role), replica))

so the numbers a replica sees never depend on how many workers run or in
which order replicas are scheduled.
"""
from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

MASK64 = (1 << 64) - 1


def role_key(role: str) -> int:
    return zlib.crc32(role.encode("utf-8"))


def seed_sequence(master: int, role: str, replica: int = 0) -> np.random.SeedSequence:
    if not 0 <= master <= MASK64:
        raise ValueError(f"master seed must be an unsigned 64-bit integer, got {master}")
    if replica < 0:
        raise ValueError("replica index must be nonnegative")
    return np.random.SeedSequence(entropy=master, spawn_key=(role_key(role), replica))


def stream(master: int, role: str, replica: int = 0) -> np.random.Generator:
    """Return an independent PCG64 generator for ``(master, role, replica)``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master, role, replica)))


def ordered_map(func, items, threads: int = 1) -> list:
    """``map`` over a worker pool with results in input order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [func(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))
