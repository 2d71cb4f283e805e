from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable

import numpy as np

from .autodiff import Tensor


class Adam:
    """First/second-moment adaptive update with optional global-norm clipping."""

    def __init__(self, params: Iterable[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = None):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: dict):
        self.t += 1
        gs = [grads.get(p) for p in self.params]
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in gs if g is not None))
            if norm > self.clip_norm:
                gs = [None if g is None else g * (self.clip_norm / norm) for g in gs]
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, gs, self.m, self.v):
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@contextmanager
def frozen(params: Iterable[Tensor]):
    """Treat ``params`` as constants for the duration of the block."""
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag
