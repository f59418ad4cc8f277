"""Differentiable operations on :class:`Tensor`.

Convolution is cross-correlation, lowered to a single matrix product via
im2col. Layout is NCHW throughout.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fddf.errors import DegenerateBatchError, DimensionError, LabelError
from fddf.nn.tensor import Tensor, as_tensor


def _require_rank(x: Tensor, rank: int, op: str, axes: str) -> None:
    if x.ndim != rank:
        raise DimensionError(f"{op}: expected a rank-{rank} {axes} tensor, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    _require_rank(x, 4, "conv2d", "[N,C,H,W] input")
    _require_rank(weight, 4, "conv2d", "[K,C,kh,kw] weight")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be positive and padding non-negative")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"conv2d: input channel axis C={c} does not match weight channel axis {wc}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel (kh={kh}, kw={kw}) exceeds padded input (H={h + 2 * padding}, W={w + 2 * padding})"
        )
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"conv2d: bias axis has shape {bias.shape}, expected ({k},)")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    # im2col gathers along a channels-last view: contiguous runs of C are
    # much cheaper to copy than the NCHW window transpose
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xp = xp.transpose(0, 2, 3, 1)
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp[:, : stride * ho : stride, : stride * wo : stride, :]).reshape(-1, c)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
        # (N, ho, wo, C, kh, kw) -> (N*ho*wo, kh*kw*C)
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * c)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(k, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))

    hp, wp = xp.shape[1:3]

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((g2.T @ cols).reshape(k, kh, kw, c).transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad and stride == 1 and padding < min(kh, kw):
            # stride-1 input gradient is a full correlation with the flipped kernel
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gp = np.pad(g.transpose(0, 2, 3, 1), ((0, 0), (ph, ph), (pw, pw), (0, 0)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(1, 2))[:, :h, :w]
            gcols = gwin.transpose(0, 1, 2, 4, 5, 3)[:, :, :, ::-1, ::-1, :].reshape(-1, kh * kw * k)
            wflip = weight.data.transpose(1, 2, 3, 0).reshape(c, -1)
            gx = np.ascontiguousarray((gcols @ wflip.T).reshape(n, h, w, c).transpose(0, 3, 1, 2))
        elif x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
            gxp = gxp.transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            gx = np.ascontiguousarray(gxp)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, parents, backward, "conv2d")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode ``running_mean``/``running_var`` are updated in place
    (unbiased variance for the running estimate, biased for normalization).
    """
    _require_rank(x, 4, "batchnorm2d", "[N,C,H,W] input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    g4 = gamma.data.reshape(1, c, 1, 1)
    if training:
        m = n * h * w
        if m < 2:
            raise DegenerateBatchError(f"batchnorm2d: N*H*W = {m} < 2 in train mode")
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mean
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * invstd
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c) * (m / (m - 1))
    else:
        invstd = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1).astype(x.dtype)) * invstd
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * g4
        if training:
            m = n * h * w
            gx = (invstd / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * invstd
        return gx, ggamma, gbeta

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def relu6(x: Tensor) -> Tensor:
    # boundary ties (x == 0 or x == 6) take gradient 0
    mask = (x.data > 0) & (x.data < 6)
    out = np.clip(x.data, 0, 6)
    return Tensor._from_op(out, (x,), lambda g: (g * mask,), "relu6")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # stable for large |x|
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def global_avg_pool(x: Tensor) -> Tensor:
    _require_rank(x, 4, "global_avg_pool", "[N,C,H,W] input")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    scale = np.asarray(1.0 / (h * w), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], (n, c, h, w)).copy(),)

    return Tensor._from_op(out, (x,), backward, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    _require_rank(x, 2, "linear", "[N,D] input")
    _require_rank(weight, 2, "linear", "[M,D] weight")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input D={x.shape[1]} does not match weight D={weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} does not match M={weight.shape[0]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    xd, wd = x.data, weight.data

    def backward(g):
        grads = (g @ wd, g.T @ xd)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, parents, backward, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return Tensor._from_op(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class over the batch."""
    _require_rank(logits, 2, "cross_entropy", "[N,2] logits")
    labels = np.asarray(labels)
    n, k = logits.shape
    if n < 1:
        raise DimensionError("cross_entropy: empty batch")
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if k != 2 or not np.isin(labels, (0, 1)).all():
        raise LabelError(f"cross_entropy: labels must be in {{0, 1}}, got {np.unique(labels).tolist()}")
    labels = labels.astype(np.int64)
    logp = log_softmax(logits)
    picked = logp[np.arange(n), labels]
    return picked.mean() * -1.0


def weighted_sum(features, weights: Tensor) -> Tensor:
    """``sum_i weights[:, i] * features[i]`` with per-sample scalar weights."""
    _require_rank(weights, 2, "weighted_sum", "[N,S] weight")
    if weights.shape[1] != len(features):
        raise DimensionError(f"weighted_sum: {weights.shape[1]} weights for {len(features)} features")
    total = None
    for i, f in enumerate(features):
        term = weights[:, i].reshape(-1, 1, 1, 1) * as_tensor(f)
        total = term if total is None else total + term
    return total
