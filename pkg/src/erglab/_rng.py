"""Counter-based random streams.

Every Monte-Carlo loop is cut into fixed-size blocks.  Block ``i`` of the loop
tagged ``tag`` draws from a generator seeded by ``(master_seed, crc32(tag), i)``,
so results do not depend on how blocks are distributed over workers.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, TypeVar

import numpy as np

BLOCK_SIZE = 512
_U64 = (1 << 64) - 1

T = TypeVar("T")


def tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, index: int) -> np.random.Generator:
    """Generator for block ``index`` of the loop ``tag``."""
    ss = np.random.SeedSequence([int(seed) & _U64, tag_key(tag), int(index)])
    return np.random.default_rng(ss)


def map_blocks(
    fn: Callable[[np.random.Generator, int, int], T],
    total: int,
    seed: int,
    tag: str,
    workers: int = 1,
    block_size: int = BLOCK_SIZE,
) -> List[T]:
    """Run ``fn(rng, count, offset)`` over consecutive blocks covering ``total`` items.

    Results come back in block order regardless of ``workers``.
    """
    jobs = []
    offset = 0
    index = 0
    while offset < total:
        count = min(block_size, total - offset)
        jobs.append((index, offset, count))
        offset += count
        index += 1

    def _one(job):
        i, off, cnt = job
        return fn(stream(seed, tag, i), cnt, off)

    if workers <= 1 or len(jobs) <= 1:
        return [_one(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_one, jobs))


def derive(seed: int, tag: str) -> int:
    """A 64-bit child seed for the experiment ``tag`` under ``seed``."""
    ss = np.random.SeedSequence([int(seed) & _U64, tag_key(tag)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
