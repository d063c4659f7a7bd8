#!/usr/bin/env python3
"""
Worker pool management for the qdiff kernels.

Kernels take an explicit WorkerPool; when none is passed they use the
process-wide pool returned by get_worker_pool(). The CLI owns that pool and
sizes it from --threads, falling back to QDIFF_THREADS and then the logical
core count.
"""

import os
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, TypeVar

from dotenv import load_dotenv

logger = logging.getLogger(__name__)

T = TypeVar("T")

# Global pool instance
_worker_pool: Optional['WorkerPool'] = None


def default_thread_count() -> int:
    """Thread count from QDIFF_THREADS, else the number of logical cores."""
    raw = os.getenv("QDIFF_THREADS")
    if raw:
        try:
            value = int(raw)
            if value >= 1:
                return value
        except ValueError:
            pass
        logger.warning(f"Ignoring invalid QDIFF_THREADS={raw!r}")
    return os.cpu_count() or 1


class WorkerPool:
    """
    Fixed-size pool of worker threads with deterministic work partitioning.

    An index range [0, n) is cut into contiguous, balanced blocks; block b
    always covers the same indices for a given (n, threads), and every index
    lands in exactly one block. Results come back in block order, so callers
    that combine them in that order get results independent of scheduling.
    """

    def __init__(self, threads: Optional[int] = None):
        """
        Initialize the pool.

        Args:
            threads: Worker count (or from QDIFF_THREADS / core count)
        """
        self.threads = int(threads) if threads else default_thread_count()
        if self.threads < 1:
            raise ValueError(f"WorkerPool needs at least one thread, got {self.threads}")

        # A single worker runs inline: no executor, no thread hop
        self._executor: Optional[ThreadPoolExecutor] = None
        if self.threads > 1:
            self._executor = ThreadPoolExecutor(
                max_workers=self.threads,
                thread_name_prefix="qdiff-worker"
            )

        logger.debug(f"Worker pool started with {self.threads} thread(s)")

    def partition(self, n: int, parts: Optional[int] = None) -> List[range]:
        """
        Split [0, n) into at most `parts` contiguous non-empty blocks.

        Args:
            n: Size of the index range
            parts: Number of blocks (default: pool thread count)

        Returns:
            Blocks in ascending index order
        """
        if n <= 0:
            return []
        parts = min(parts or self.threads, n)
        base, extra = divmod(n, parts)
        blocks = []
        start = 0
        for b in range(parts):
            size = base + (1 if b < extra else 0)
            blocks.append(range(start, start + size))
            start += size
        return blocks

    def run(self, fn: Callable[[range], T], n: int, parts: Optional[int] = None) -> List[T]:
        """
        Apply fn to every block of [0, n) and wait for all of them.

        Args:
            fn: Work function receiving one block of indices
            n: Size of the index range
            parts: Number of blocks (default: pool thread count)

        Returns:
            One result per block, in block order
        """
        blocks = self.partition(n, parts)
        if self._executor is None or len(blocks) <= 1:
            return [fn(block) for block in blocks]

        futures = [self._executor.submit(fn, block) for block in blocks]
        return [f.result() for f in futures]

    def close(self):
        """Shut the worker threads down."""
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self) -> 'WorkerPool':
        return self

    def __exit__(self, *exc):
        self.close()


def get_worker_pool() -> WorkerPool:
    """
    Get the global worker pool instance.
    Creates one if it doesn't exist.
    """
    global _worker_pool

    if _worker_pool is None:
        # Load environment variables
        load_dotenv()
        _worker_pool = WorkerPool()

    return _worker_pool


def set_worker_pool(pool: WorkerPool):
    """Set the global worker pool instance."""
    global _worker_pool
    if _worker_pool is not None and _worker_pool is not pool:
        _worker_pool.close()
    _worker_pool = pool


def close_worker_pool():
    """Close the global pool."""
    global _worker_pool
    if _worker_pool:
        _worker_pool.close()
        _worker_pool = None
