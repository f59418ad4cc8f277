"""Central finite-difference checks for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from fddf.nn.tensor import Tensor, default_dtype


def numerical_grad(fn: Callable[[], float], array: np.ndarray, eps: float) -> np.ndarray:
    """d fn / d array by central differences, perturbing ``array`` in place."""
    grad = np.zeros(array.shape, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn()
        flat[i] = orig - eps
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def check_gradients(
    op: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    rng: np.random.Generator,
    eps: float | None = None,
) -> float:
    """Largest relative error between autodiff and finite differences.

    The op output is contracted with a fixed random cotangent so that every
    output element contributes. Relative error is measured per input as
    ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)`` in the 2-norm.
    """
    if eps is None:
        eps = 1e-2 if default_dtype() == np.float32 else 1e-6
    out = op(*inputs)
    cot = rng.standard_normal(out.shape).astype(out.dtype)

    for t in inputs:
        t.grad = None
    loss = (out * Tensor(cot)).sum()
    loss.backward()

    def value() -> float:
        return float(np.sum(op(*inputs).data.astype(np.float64) * cot))

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        numeric = numerical_grad(value, t.data, eps)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
