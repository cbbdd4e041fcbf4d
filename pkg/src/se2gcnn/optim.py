"""Stochastic gradient descent with momentum."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autograd import Tensor


def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                      velocities: Sequence[np.ndarray], lr: float, momentum: float) -> None:
    """In-place update ``v <- momentum*v - lr*g``, ``p <- p + v``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    for p, g, v in zip(params, grads, velocities):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= p.dtype.type(momentum)
        v -= p.dtype.type(lr) * g.astype(p.dtype, copy=False)
        p += v


class SGDMomentum:
    """Owns one velocity buffer per parameter tensor."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        sgd_momentum_step([p.data for p in self.params], grads, self.velocities, self.lr, self.momentum)
