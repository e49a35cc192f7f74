"""Classic (heavy-ball) momentum SGD."""
from __future__ import annotations

import numpy as np


class SGD:
    """``v <- momentum * v + grad; p <- p - lr * v`` for each parameter.

    Parameters whose ``.grad`` is ``None`` are skipped entirely, velocity
    included, so a frozen group never drifts on stale momentum.
    """

    def __init__(self, params, lr=1e-3, momentum=0.9):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_dict(self):
        return {"lr": self.lr, "momentum": self.momentum, "velocity": [v.copy() for v in self.velocity]}


def sgd_momentum_step(params, grads, velocity, lr, momentum):
    """Functional form of one update; returns ``(new_params, new_velocity)``."""
    new_v = [momentum * v + g for v, g in zip(velocity, grads)]
    new_p = [p - lr * v for p, v in zip(params, new_v)]
    return new_p, new_v
