"""Textbook first-order optimizers over Param lists."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import NumericalError
from .numerics import Param


def _guard_finite(params: Sequence[Param]):
    for i, p in enumerate(params):
        if not np.isfinite(p.grad).all():
            raise NumericalError(
                f"non-finite gradient on param {i} (shape {p.value.shape}); "
                f"|value| max {np.abs(p.value).max():.3e}")


class SGDMomentum:
    def __init__(self, params: Sequence[Param], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        _guard_finite(self.params)
        for p, v in zip(self.params, self.velocity):
            if p.frozen:
                continue
            v *= self.momentum
            v += p.grad
            p.value -= self.lr * v


class Adam:
    def __init__(self, params: Sequence[Param], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        _guard_finite(self.params)
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.frozen:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.value -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def make_optimizer(name: str, params: Sequence[Param], lr: float):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd_momentum":
        return SGDMomentum(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")
