"""Gradient-step rules used by the training loops."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class SgdMomentum:
    """Classic momentum SGD: v = mu*v + g; w -= lr*v."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, weights: dict[str, Tensor], grads: dict[str, Tensor],
             lr: float) -> dict[str, Tensor]:
        out = {}
        for name, w in weights.items():
            g = grads[name].data
            v = self._velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self._velocity[name] = v
            out[name] = Tensor(w.data - np.float32(lr) * v, copy=False)
        return out


class Adam:
    """Adam with bias correction; used for the policy parameters, whose raw
    gradient scales vary by orders of magnitude across alpha/beta/magnitude."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, weights: dict[str, Tensor], grads: dict[str, Tensor],
             lr: float) -> dict[str, Tensor]:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for name, w in weights.items():
            g = grads[name].data.astype(np.float64)
            m = self._m.get(name, np.zeros_like(g))
            v = self._v.get(name, np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self._m[name] = m
            self._v[name] = v
            m_hat = m / (1 - b1 ** self._t)
            v_hat = v / (1 - b2 ** self._t)
            step = lr * m_hat / (np.sqrt(v_hat) + self.eps)
            out[name] = Tensor((w.data.astype(np.float64) - step).astype(np.float32), copy=False)
        return out
