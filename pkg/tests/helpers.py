#!/usr/bin/env python3
"""
Shared fixtures and the script runner used by every test file.
"""

import os
import sys
import traceback
from unittest import SkipTest
from typing import Callable, List, Sequence

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np

from tensor import Tensor
from unet import UnetConfig


def tiny_config(image_size: int = 8) -> UnetConfig:
    """Small Unet that keeps every block: two levels, GroupNorm, attention."""
    return UnetConfig(base_channels=4, channel_mults=[1, 2], groups=2, time_dim=8,
                      image_size=image_size, heads=2)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / denom)


def numeric_gradient(loss_fn: Callable[[], float], param: Tensor, indices=None) -> np.ndarray:
    """
    Central differences of loss_fn w.r.t. entries of param (float64), with
    step 1e-3 * max(1, |theta|). Only `indices` (flat) are perturbed when given.
    """
    flat = param.data.reshape(-1)
    indices = range(flat.size) if indices is None else indices
    grad = np.zeros(len(indices))
    for j, i in enumerate(indices):
        orig = flat[i]
        h = 1e-3 * max(1.0, abs(orig))
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        grad[j] = (up - down) / (2 * h)
    return grad


def run_all(title: str, tests: Sequence[Callable[[], None]]) -> int:
    """Run test functions, print one status line each, return the exit code."""
    print(f"🧪 {title}")
    print("=" * 50)
    failed: List[str] = []
    for test in tests:
        name = test.__name__
        try:
            test()
            print(f"   ✅ {name}")
        except SkipTest as e:
            print(f"   ⏭️  {name} skipped: {e}")
        except Exception as e:
            failed.append(name)
            print(f"   ❌ {name}: {type(e).__name__}: {e}")
            traceback.print_exc()
    print("=" * 50)
    if failed:
        print(f"⚠️  {len(failed)} of {len(tests)} test(s) failed: {', '.join(failed)}")
        return 1
    print(f"🎉 All {len(tests)} tests passed")
    return 0

