"""Adam optimizer over :class:`~mahacal.tensor.Tensor` parameters."""

from __future__ import annotations

import logging
from typing import Iterable

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)


class Adam:
    """Adam with bias correction (Kingma & Ba).

    A step whose gradients contain a non-finite value is skipped entirely and
    reported through the return value; the step counter is not advanced.
    Parameters whose ``grad`` is ``None`` are treated as having a zero
    gradient.
    """

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.skipped = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> bool:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            logger.warning("non-finite gradient; skipping Adam step %d", self.step_count + 1)
            return False
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            # new array, so values saved by earlier forward passes stay intact
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True
