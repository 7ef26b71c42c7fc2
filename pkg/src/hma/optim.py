"""SGD with classical momentum over named parameter dicts."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class MissingGradientError(RuntimeError):
    """Raised when stepping a parameter whose gradient was never populated."""


class SgdMomentum:
    """v <- momentum * v + g; theta <- theta - lr * v; gradients cleared after.

    Velocity buffers are keyed by parameter name so they survive checkpoint
    round-trips.
    """

    def __init__(self, lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            if p.grad is None:
                raise MissingGradientError(f"parameter '{name}' has no gradient")
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            elif v.shape != p.data.shape:
                raise ValueError(
                    f"velocity shape {v.shape} does not match parameter "
                    f"'{name}' shape {p.data.shape}"
                )
            v = self.momentum * v + p.grad
            p.data = p.data - self.lr * v
            self.velocity[name] = v
            p.grad = None
