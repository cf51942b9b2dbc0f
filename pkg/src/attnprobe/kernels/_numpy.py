"""Reference conv2d kernels built on numpy strided views and BLAS matmul.

All three functions operate on already-padded NCHW inputs; padding and
cropping are handled by the dispatch wrappers in ``attnprobe.kernels``.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _patch_view(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape [B, C, kh, kw, Ho, Wo] over a padded input, no copy."""
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )


def conv2d_forward(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    patches = _patch_view(xp, w.shape[2], w.shape[3], stride)
    y = np.tensordot(patches, w, axes=([1, 2, 3], [1, 2, 3]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward_weight(
    xp: np.ndarray, gy: np.ndarray, stride: int, kh: int, kw: int
) -> np.ndarray:
    # shift-and-add: one [O, B*N] x [B*N, C] GEMM per kernel tap; avoids the
    # 6-D patch-tensor copy, which dominates at larger spatial sizes
    b, c, _, _ = xp.shape
    o, ho, wo = gy.shape[1], gy.shape[2], gy.shape[3]
    gyf = np.ascontiguousarray(gy.transpose(1, 0, 2, 3)).reshape(o, -1)
    gw = np.empty((o, c, kh, kw), dtype=gy.dtype)
    for k in range(kh):
        for l in range(kw):
            view = xp[:, :, k : k + stride * ho : stride, l : l + stride * wo : stride]
            flat = np.ascontiguousarray(view.transpose(0, 2, 3, 1)).reshape(-1, c)
            gw[:, :, k, l] = gyf @ flat
    return gw


def conv2d_backward_input(
    w: np.ndarray, gy: np.ndarray, stride: int, hp: int, wp: int
) -> np.ndarray:
    b = gy.shape[0]
    _, ci, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    # [B, Ho, Wo, Ci, kh, kw]
    g = np.tensordot(gy, w, axes=([1], [0]))
    gxp = np.zeros((b, ci, hp, wp), dtype=gy.dtype)
    for k in range(kh):
        for l in range(kw):
            gxp[:, :, k : k + stride * ho : stride, l : l + stride * wo : stride] += (
                g[:, :, :, :, k, l].transpose(0, 3, 1, 2)
            )
    return gxp
