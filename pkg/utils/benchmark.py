#!/usr/bin/env python3
"""
Wall-clock latency measurement.
"""

import logging
import time
from typing import Any, Callable

import numpy as np
from pydantic import BaseModel

logger = logging.getLogger(__name__)


class LatencyStats(BaseModel):
    """Median and 10th/90th percentile wall time of repeated calls, in nanoseconds."""
    median_ns: float
    p10_ns: float
    p90_ns: float
    repeats: int

    @property
    def median_s(self) -> float:
        return self.median_ns / 1e9


def measure(fn: Callable[[], Any], repeats: int = 20, warmup: int = 3) -> LatencyStats:
    """
    Time `repeats` calls of fn after `warmup` untimed calls.

    Args:
        fn: Zero-argument callable
        repeats: Timed calls
        warmup: Untimed calls made first
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    for _ in range(warmup):
        fn()
    samples = np.empty(repeats, dtype=np.float64)
    for i in range(repeats):
        start = time.perf_counter_ns()
        fn()
        samples[i] = time.perf_counter_ns() - start
    p10, median, p90 = np.percentile(samples, [10, 50, 90])
    return LatencyStats(median_ns=float(median), p10_ns=float(p10), p90_ns=float(p90), repeats=repeats)
