"""Small neural-net building blocks with explicit hand-written gradients.

Everything is dtype-preserving (float32 for production training, float64
for finite-difference verification) and deterministic for fixed inputs.
Convolutions dispatch to ``attnprobe.kernels``.
"""

from __future__ import annotations

import numpy as np

from . import kernels


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; branchless and vectorized
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int, pad: int) -> np.ndarray:
    y = kernels.conv2d_forward(x, w, stride=stride, pad=pad)
    if b is not None:
        y += b[None, :, None, None]
    return y


def conv2d_grads(
    x: np.ndarray, w: np.ndarray, gy: np.ndarray, stride: int, pad: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (gx, gw, gb) for y = conv(x, w) + b."""
    gx = kernels.conv2d_backward_input(w, gy, stride, pad, x.shape[2], x.shape[3])
    gw = kernels.conv2d_backward_weight(x, gy, stride, pad, w.shape[2], w.shape[3])
    gb = gy.sum(axis=(0, 2, 3))
    return gx, gw, gb


def feature_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Standardize each sample over all (C,H,W) features, per-channel affine.

    Note: per-channel *spatial* standardization would zero out every
    channel mean and make a following global pool degenerate, so the
    statistics are taken over the whole feature volume instead.
    """
    axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv)


def feature_norm_grads(gy: np.ndarray, gamma: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv = cache
    axes = tuple(range(1, gy.ndim))
    n = int(np.prod(gy.shape[1:]))
    ggamma = (gy * xhat).sum(axis=(0, 2, 3))
    gbeta = gy.sum(axis=(0, 2, 3))
    gxhat = gy * gamma[None, :, None, None]
    gsum = gxhat.sum(axis=axes, keepdims=True)
    gdot = (gxhat * xhat).sum(axis=axes, keepdims=True)
    gx = (inv / n) * (n * gxhat - gsum - xhat * gdot)
    return gx, ggamma, gbeta


def softmax_last(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_last_grad(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    dot = (gy * y).sum(axis=-1, keepdims=True)
    return y * (gy - dot)


class AdamState:
    """Per-parameter first/second moment buffers plus a step counter."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    state.t += 1
    b1t = 1.0 - beta1**state.t
    b2t = 1.0 - beta2**state.t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[k] -= (lr * (m / b1t) / (np.sqrt(v / b2t) + eps)).astype(params[k].dtype)
