import math

import numpy as np

__all__ = ["AdamW", "cosine_lr"]


def cosine_lr(epoch, total_epochs, lr_init, lr_min=0.0):
    """Cosine-annealed learning rate; ``lr(0) = lr_init`` and ``lr(total) = lr_min``."""
    if total_epochs <= 0:
        return lr_init
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


class AdamW:
    """Adam with decoupled weight decay over a dict of named arrays, updated in place."""

    def __init__(self, params, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
