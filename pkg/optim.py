#!/usr/bin/env python3
"""
Adam optimizer over named parameter tensors.
"""

import logging
from typing import Dict, Mapping, Optional

import numpy as np

from tensor import Tensor

logger = logging.getLogger(__name__)


class Adam:
    """
    Adaptive-moment gradient method with the usual bias correction.

    Parameters are updated in place, in name order, from the gradient
    mapping returned by Tape.backward.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ValueError(f"Learning rate must be >= 0, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v: Dict[str, np.ndarray] = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]):
        """Apply one update; parameters missing from `grads` are left as they are."""
        self.step_count += 1
        if self.lr == 0:
            return
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name in sorted(self.params):
            g: Optional[np.ndarray] = grads.get(name)
            if g is None:
                continue
            p = self.params[name]
            if g.shape != p.shape:
                raise ValueError(f"Gradient for {name} has shape {g.shape}, parameter has {p.shape}")
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data -= update.astype(p.dtype)

