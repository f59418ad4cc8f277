"""Momentum SGD, the only optimizer."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from fddf.errors import UninitializedGradientError
from fddf.nn.layers import Parameter


class SGD:
    """Heavy-ball momentum: ``v = momentum * v + grad``; ``p -= lr * v``.

    ``weight_decay`` adds ``wd * p`` to each gradient; ``max_grad_norm``
    rescales the joint gradient when its 2-norm exceeds the bound.
    ``step`` zeroes every gradient after applying the update.
    """

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        max_grad_norm: float | None = None,
    ):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self._velocity: list[np.ndarray | None] = [None] * len(self.params)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise UninitializedGradientError(f"parameter #{i} with shape {p.shape} has no gradient")
        scale = 1.0
        if self.max_grad_norm is not None:
            norm = float(np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in self.params)))
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / norm
        for i, p in enumerate(self.params):
            g = p.grad * scale if scale != 1.0 else p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self._velocity[i]
            if self.momentum and v is not None:
                v *= self.momentum
                v += g
            else:
                v = g.astype(p.dtype, copy=True)
            self._velocity[i] = v
            p.data -= (self.lr * v).astype(p.dtype, copy=False)
            p.grad = None


def sgd_step(params: Sequence[Parameter], lr: float, momentum: float = 0.0) -> None:
    """Single stateless update (momentum buffer starts at zero)."""
    SGD(params, lr, momentum).step()
