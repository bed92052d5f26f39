"""Bias-corrected Adam."""

from __future__ import annotations

import numpy as np


def adam_step(value, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update; returns (new_value, new_m, new_v). t is 1-based."""
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Keeps per-parameter moments for a list of tape Parameters."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            grad = p.grad if p.grad is not None else np.zeros_like(p.value)
            p.value, self._m[i], self._v[i] = adam_step(
                p.value, grad, self._m[i], self._v[i], self.t,
                self.lr, self.beta1, self.beta2, self.eps,
            )

    def zero_grad(self):
        for p in self.params:
            p.grad = None
