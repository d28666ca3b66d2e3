"""Momentum SGD and Adam over :class:`~g2d.diffkernel.Parameter` lists."""

from __future__ import annotations

import numpy as np

from .diffkernel import Parameter


def step_lr(base_lr: float, epoch: int, gamma: float = 0.5, step: int = 16) -> float:
    """Learning rate after ``epoch`` completed epochs: halved every ``step`` epochs."""
    return base_lr * gamma ** (epoch // step)


class SGD:
    """Momentum SGD with coupled L2 weight decay (``grad += wd * w``)."""

    def __init__(self, params: list[Parameter], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p, buf in zip(self.params, self._buf):
            if not p.trainable:
                continue
            d = p.grad + self.weight_decay * p.value if self.weight_decay else p.grad
            if self.momentum:
                buf *= self.momentum
                buf += d
                d = buf
            p.value -= self.lr * d


class Adam:
    """Adam with bias-corrected moment estimates."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if not p.trainable:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
