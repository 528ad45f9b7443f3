"""SGD-with-momentum and Adam, plus a step learning-rate schedule."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .errors import UsageError, ValidationError
from .tensor import Tensor


class Optimizer:
    def __init__(self, params: Iterable[Tensor], lr: float):
        self.params = list(params)
        if not self.params:
            raise ValidationError("optimizer got an empty parameter list")
        if lr < 0:
            raise ValidationError(f"learning rate must be >= 0, got {lr}")
        self.lr = float(lr)

    def _grads(self) -> list[np.ndarray]:
        grads = []
        for i, p in enumerate(self.params):
            if p.grad is None:
                label = p.name or f"#{i}"
                raise UsageError(f"parameter {label} has no gradient; call backward() before step()")
            grads.append(p.grad)
        return grads

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = self._grads()
        self._update(grads)
        self.zero_grad()

    def _update(self, grads: list[np.ndarray]) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """Heavy-ball SGD: ``buf = momentum * buf + g``; ``p -= lr * buf``."""

    def __init__(self, params, lr: float = 0.01, momentum: float = 0.0, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def _update(self, grads):
        for p, g, buf in zip(self.params, grads, self.buffers):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            if self.lr:
                p.data -= (self.lr * buf).astype(p.data.dtype, copy=False)


class Adam(Optimizer):
    def __init__(self, params, lr: float = 0.001, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr:
                upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                p.data -= upd.astype(p.data.dtype, copy=False)


def step_lr(base_lr: float, epoch: int, every: int = 100, factor: float = 0.1) -> float:
    """Learning rate for a 0-based ``epoch`` under a step decay schedule."""
    if every <= 0:
        return base_lr
    return base_lr * factor ** (epoch // every)
