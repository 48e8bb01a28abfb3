"""First-order optimizers acting in place on flat parameter vectors."""

from __future__ import annotations

import numpy as np


class SGD:
    """SGD with optional heavy-ball momentum and L2 weight decay (PyTorch semantics)."""

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = None

    def step(self, theta: np.ndarray, grad: np.ndarray):
        g = grad + self.weight_decay * theta if self.weight_decay else grad
        if self.momentum:
            if self._velocity is None:
                self._velocity = np.array(g, copy=True)
            else:
                self._velocity = self.momentum * self._velocity + g
            g = self._velocity
        theta -= self.lr * g


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = None
        self._v = None
        self._t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray):
        g = grad + self.weight_decay * theta if self.weight_decay else grad
        if self._m is None:
            self._m = np.zeros_like(theta)
            self._v = np.zeros_like(theta)
        self._t += 1
        self._m = self.b1 * self._m + (1 - self.b1) * g
        self._v = self.b2 * self._v + (1 - self.b2) * g * g
        m_hat = self._m / (1 - self.b1 ** self._t)
        v_hat = self._v / (1 - self.b2 ** self._t)
        theta -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
    if name == "sgd":
        return SGD(lr, momentum, weight_decay)
    if name == "adam":
        return Adam(lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")
