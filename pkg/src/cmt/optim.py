"""Decoupled-weight-decay Adam and the warmup-then-constant schedule."""

import numpy as np

from . import autodiff as ad


class AdamW:
    """Weight decay applies only to matrices; gains, biases and embeddings of
    rank < 2 are excluded, following common practice."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.items = list(params.items()) if isinstance(params, dict) else list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.items]
        self.v = [np.zeros_like(p.data) for _, p in self.items]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, (_, p) in enumerate(self.items):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= np.float32(self.lr * self.weight_decay) * p.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            update = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            p.data -= np.float32(self.lr) * update.astype(np.float32)

    def zero_grad(self):
        ad.zero_grads(p for _, p in self.items)


def warmup_constant_lr(step, total_steps, base_lr, warmup_ratio):
    """Linear warmup over ceil(total*ratio) steps, then constant base_lr."""
    warmup = max(1, int(round(total_steps * warmup_ratio)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    return base_lr
