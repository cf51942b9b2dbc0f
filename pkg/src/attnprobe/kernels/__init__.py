"""Hot conv2d kernels: compiled core plus a numpy/BLAS implementation.

Backend selection happens at import. When the compiled Cython extension
(``attnprobe.kernels._native``) imported cleanly the default ``auto`` mode
routes each call by shape: direct compiled loops win on skinny kernels
(im2col patch-matrix K = C_in*kh*kw small, where BLAS pays more for
packing than it gains), while the numpy/BLAS path wins once the implied
GEMM is big enough. ``ATTNPROBE_KERNELS=native|numpy`` forces one backend
everywhere; ``benchmarks/bench_kernels.py`` measures the crossover.

All kernels take NCHW ``float32``/``float64`` arrays and preserve dtype.
"""

import importlib
import os

import numpy as np

from . import _numpy

_requested = os.environ.get("ATTNPROBE_KERNELS", "auto")
if _requested not in ("auto", "native", "numpy"):
    raise ValueError(f"ATTNPROBE_KERNELS must be auto|native|numpy, got {_requested!r}")

_native = None
if _requested in ("auto", "native"):
    try:
        _native = importlib.import_module("._native", __package__)
    except ImportError:
        if _requested == "native":
            raise

if _native is None:
    BACKEND = "numpy"
elif _requested == "native":
    BACKEND = "native"
else:
    BACKEND = "auto"

# Empirical crossover: below this patch-matrix K the direct loops beat BLAS.
SKINNY_K = 16


def get_backend() -> str:
    return BACKEND


def _use_native(k_dim: int) -> bool:
    if BACKEND == "numpy" or _native is None:
        return False
    if BACKEND == "native":
        return True
    return k_dim <= SKINNY_K


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """y[b,o] = sum_c x[b,c] * w[o,c]; output spatial dims follow stride/pad."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: x{x.shape} w{w.shape}")
    impl = _native if _use_native(w.shape[1] * w.shape[2] * w.shape[3]) else _numpy
    return impl.conv2d_forward(_pad(x, pad), np.ascontiguousarray(w), stride)


def conv2d_backward_weight(
    x: np.ndarray, gy: np.ndarray, stride: int, pad: int, kh: int, kw: int
) -> np.ndarray:
    """Gradient of the conv output w.r.t. the kernel, summed over the batch.

    The batch reduction makes this GEMM-shaped at every size we hit, so
    ``auto`` never routes it to the direct loops (they only win when forced).
    """
    impl = _native if BACKEND == "native" else _numpy
    return impl.conv2d_backward_weight(_pad(x, pad), np.ascontiguousarray(gy), stride, kh, kw)


def conv2d_backward_input(
    w: np.ndarray, gy: np.ndarray, stride: int, pad: int, in_h: int, in_w: int
) -> np.ndarray:
    """Gradient of the conv output w.r.t. the (unpadded) input."""
    impl = _native if _use_native(w.shape[1] * w.shape[2] * w.shape[3]) else _numpy
    gxp = impl.conv2d_backward_input(
        np.ascontiguousarray(w),
        np.ascontiguousarray(gy),
        stride,
        in_h + 2 * pad,
        in_w + 2 * pad,
    )
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, :, pad : pad + in_h, pad : pad + in_w])
