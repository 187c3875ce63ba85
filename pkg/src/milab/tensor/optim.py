"""Gradient-descent optimizers over lists of parameter tensors."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import Tensor


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        self.params = list(params)
        self.lr = lr

    def step(self, grads: Sequence[Tensor]) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g.shape != p.shape:
                raise ValueError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
            p.data = self._update(i, p.data, g.data)

    def _update(self, i: int, p: np.ndarray, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    """Plain SGD, optionally with (heavy-ball) momentum."""

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[int, np.ndarray] = {}

    def _update(self, i, p, g):
        if self.weight_decay:
            g = g + self.weight_decay * p
        if self.momentum:
            v = self._velocity.get(i)
            v = g if v is None else self.momentum * v + g
            self._velocity[i] = v
            g = v
        return p - self.lr * g


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t: dict[int, int] = {}

    def _update(self, i, p, g):
        t = self._t.get(i, 0) + 1
        m = self.beta1 * self._m.get(i, 0.0) + (1 - self.beta1) * g
        v = self.beta2 * self._v.get(i, 0.0) + (1 - self.beta2) * g * g
        self._t[i], self._m[i], self._v[i] = t, m, v
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        return p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, params, lr: float, **kw) -> Optimizer:
    kind = kind.lower()
    if kind == "sgd":
        return SGD(params, lr, **kw)
    if kind == "adam":
        return Adam(params, lr, **kw)
    raise ValueError(f"unknown optimizer {kind!r}")
