from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


class MissingGradientError(RuntimeError):
    pass


class Adam:
    """Adaptive-moment optimizer with decoupled L2 decay.

    Each step applies ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + l2_rate * p)``
    where the decay term only touches parameters flagged in ``decay``.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        l2_rate: float = 0.0,
        decay: Sequence[bool] | None = None,
    ):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if l2_rate < 0:
            raise ValueError(f"l2_rate must be non-negative, got {l2_rate}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.l2_rate = l2_rate
        self.decay = list(decay) if decay is not None else [True] * len(self.params)
        if len(self.decay) != len(self.params):
            raise ValueError("decay flags must match parameters one-to-one")
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        missing = [p.name or f"#{i}" for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise MissingGradientError(f"no gradient for parameter(s): {', '.join(missing[:5])}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v, decays in zip(self.params, self.m, self.v, self.decay):
            g = p.grad.astype(p.dtype, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if decays and self.l2_rate:
                update = update + self.l2_rate * p.data
            p.data = (p.data - self.lr * update).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
