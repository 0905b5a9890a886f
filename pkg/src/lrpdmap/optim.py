"""AdamW with a cosine-annealed learning rate, over dicts of numpy arrays."""

from __future__ import annotations

import math

import numpy as np


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine annealing from ``base_lr`` at step 0 to zero at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


class AdamW:
    """Adam with decoupled weight decay (Loshchilov & Hutter).

    ``weight_decay`` maps parameter name to its decay coefficient; names not
    listed are not decayed.
    """

    def __init__(self, params: dict[str, np.ndarray], betas=(0.9, 0.999), eps=1e-8, weight_decay=None):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = dict(weight_decay or {})
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        """Update ``params`` in place. Parameters missing from ``grads`` are left alone."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            wd = self.weight_decay.get(k, 0.0)
            if wd:
                params[k] *= 1.0 - lr * wd
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
