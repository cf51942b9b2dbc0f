# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled direct-convolution kernels (OpenMP over independent slices).

Same contracts as ``attnprobe.kernels._numpy``: inputs are already padded,
NCHW, C-contiguous float32/float64. Each (batch, channel) output tile is
accumulated in a thread-local scratch buffer through raw pointers, which
gives the C compiler clean vectorizable inner loops. Threads own disjoint
output slices, so results are bit-reproducible regardless of thread count.
"""

import numpy as np

cimport cython
from cython.parallel cimport prange
from libc.stdlib cimport free, malloc
from libc.string cimport memset

ctypedef fused floating:
    float
    double


cdef inline void _acc_row(floating* dst, const floating* src, floating coeff,
                          Py_ssize_t n, Py_ssize_t stride) noexcept nogil:
    cdef Py_ssize_t i
    if stride == 1:
        for i in range(n):
            dst[i] += coeff * src[i]
    else:
        for i in range(n):
            dst[i] += coeff * src[i * stride]


def conv2d_forward(floating[:, :, :, ::1] xp, floating[:, :, :, ::1] w, int stride):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1], Hp = xp.shape[2], Wp = xp.shape[3]
    cdef Py_ssize_t O = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Ho = (Hp - kh) // stride + 1
    cdef Py_ssize_t Wo = (Wp - kw) // stride + 1
    if floating is float:
        y_arr = np.empty((B, O, Ho, Wo), dtype=np.float32)
    else:
        y_arr = np.empty((B, O, Ho, Wo), dtype=np.float64)
    cdef floating[:, :, :, ::1] y = y_arr
    cdef const floating* xbase = &xp[0, 0, 0, 0]
    cdef const floating* wbase = &w[0, 0, 0, 0]
    cdef floating* ybase = &y[0, 0, 0, 0]
    cdef Py_ssize_t b, o, c, k, l, ho
    cdef floating coeff
    cdef floating* tile
    cdef const floating* plane
    with nogil:
        for b in prange(B, schedule="static"):
            tile = <floating*> malloc(Ho * Wo * sizeof(floating))
            for o in range(O):
                memset(tile, 0, Ho * Wo * sizeof(floating))
                for c in range(C):
                    plane = xbase + (b * C + c) * Hp * Wp
                    for k in range(kh):
                        for l in range(kw):
                            coeff = wbase[((o * C + c) * kh + k) * kw + l]
                            for ho in range(Ho):
                                _acc_row(tile + ho * Wo,
                                         plane + (ho * stride + k) * Wp + l,
                                         coeff, Wo, stride)
                for ho in range(Ho):
                    for l in range(Wo):
                        ybase[((b * O + o) * Ho + ho) * Wo + l] = tile[ho * Wo + l]
            free(tile)
    return y_arr


def conv2d_backward_weight(
    floating[:, :, :, ::1] xp, floating[:, :, :, ::1] gy, int stride,
    Py_ssize_t kh, Py_ssize_t kw,
):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1], Hp = xp.shape[2], Wp = xp.shape[3]
    cdef Py_ssize_t O = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3]
    if floating is float:
        gw_arr = np.zeros((O, C, kh, kw), dtype=np.float32)
    else:
        gw_arr = np.zeros((O, C, kh, kw), dtype=np.float64)
    cdef floating[:, :, :, ::1] gw = gw_arr
    cdef const floating* xbase = &xp[0, 0, 0, 0]
    cdef const floating* gybase = &gy[0, 0, 0, 0]
    cdef Py_ssize_t b, o, c, k, l, ho, i
    cdef floating acc
    cdef const floating* grow
    cdef const floating* xrow
    with nogil:
        for o in prange(O, schedule="static"):
            for c in range(C):
                for k in range(kh):
                    for l in range(kw):
                        acc = 0
                        for b in range(B):
                            for ho in range(Ho):
                                grow = gybase + ((b * O + o) * Ho + ho) * Wo
                                xrow = xbase + (b * C + c) * Hp * Wp + (ho * stride + k) * Wp + l
                                if stride == 1:
                                    for i in range(Wo):
                                        acc = acc + grow[i] * xrow[i]
                                else:
                                    for i in range(Wo):
                                        acc = acc + grow[i] * xrow[i * stride]
                        gw[o, c, k, l] = acc
    return gw_arr


cdef inline void _scatter_row(floating* dst, const floating* src, floating coeff,
                              Py_ssize_t n, Py_ssize_t stride) noexcept nogil:
    cdef Py_ssize_t i
    if stride == 1:
        for i in range(n):
            dst[i] += coeff * src[i]
    else:
        for i in range(n):
            dst[i * stride] += coeff * src[i]


def conv2d_backward_input(
    floating[:, :, :, ::1] w, floating[:, :, :, ::1] gy, int stride,
    Py_ssize_t hp, Py_ssize_t wp,
):
    cdef Py_ssize_t O = w.shape[0], C = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t B = gy.shape[0], Ho = gy.shape[2], Wo = gy.shape[3]
    if floating is float:
        gx_arr = np.zeros((B, C, hp, wp), dtype=np.float32)
    else:
        gx_arr = np.zeros((B, C, hp, wp), dtype=np.float64)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef const floating* wbase = &w[0, 0, 0, 0]
    cdef const floating* gybase = &gy[0, 0, 0, 0]
    cdef floating* gxbase = &gx[0, 0, 0, 0]
    cdef Py_ssize_t b, o, c, k, l, ho
    cdef floating coeff
    cdef floating* plane
    with nogil:
        for b in prange(B, schedule="static"):
            for c in range(C):
                plane = gxbase + (b * C + c) * hp * wp
                for o in range(O):
                    for k in range(kh):
                        for l in range(kw):
                            coeff = wbase[((o * C + c) * kh + k) * kw + l]
                            for ho in range(Ho):
                                _scatter_row(plane + (ho * stride + k) * wp + l,
                                             gybase + ((b * O + o) * Ho + ho) * Wo,
                                             coeff, Wo, stride)
    return gx_arr
