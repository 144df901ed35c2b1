"""Adaptive-moment optimizer over ``Tensor`` leaves."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam with decoupled weight decay.

    ``params`` is either a flat list of tensors (all at ``lr``) or a list of
    ``(tensors, lr)`` pairs. Tensors without a gradient are skipped, so a
    parameter that never receives gradient never moves.
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        params = list(params)
        if params and isinstance(params[0], tuple):
            self.groups: list[tuple[list[Tensor], float]] = [(list(ps), float(g_lr)) for ps, g_lr in params]
        else:
            self.groups = [(params, float(lr))]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def parameters(self) -> Iterable[Tensor]:
        for ps, _ in self.groups:
            yield from ps

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for ps, lr in self.groups:
            for p in ps:
                if p.grad is None:
                    continue
                key = id(p)
                m = self._m.get(key)
                if m is None:
                    m = self._m[key] = np.zeros_like(p.data)
                    self._v[key] = np.zeros_like(p.data)
                v = self._v[key]
                g = p.grad
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * (g * g)
                update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                if self.weight_decay:
                    update = update + lr * self.weight_decay * p.data
                p.data = p.data - update
