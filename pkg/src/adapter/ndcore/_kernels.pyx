# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution and pooling kernels.

Same contracts as ``_kernels_py``; all arrays are C-contiguous and either
float32 or float64.
"""

import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.empty((b, ho * wo, c * kh * kw), dtype=dtype)
    cdef real[:, :, ::1] o = out
    cdef Py_ssize_t n, ch, oy, ox, i, j, col
    with nogil:
        for n in range(b):
            for oy in range(ho):
                for ox in range(wo):
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                o[n, oy * wo + ox, col] = xp[n, ch, oy * stride + i, ox * stride + j]
                                col += 1
    return out


def col2im(real[:, :, ::1] cols, tuple shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t b = shape[0], c = shape[1], hp = shape[2], wp = shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((b, c, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t n, ch, oy, ox, i, j, col
    # (i, j) outermost per pixel so the summation order matches the numpy fallback
    with nogil:
        for n in range(b):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        col = (ch * kh + i) * kw + j
                        for oy in range(ho):
                            for ox in range(wo):
                                o[n, ch, oy * stride + i, ox * stride + j] += cols[n, oy * wo + ox, col]
    return out


def maxpool_forward(real[:, :, :, ::1] xp, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t ho = (hp - k) // stride + 1
    cdef Py_ssize_t wo = (wp - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.empty((b, c, ho, wo), dtype=dtype)
    idx = np.empty((b, c, ho, wo), dtype=np.int64)
    cdef real[:, :, :, ::1] o = out
    cdef cnp.int64_t[:, :, :, ::1] a = idx
    cdef Py_ssize_t n, ch, oy, ox, i, j, y, x, best_at
    cdef real best, v
    with nogil:
        for n in range(b):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        y = oy * stride
                        x = ox * stride
                        best = xp[n, ch, y, x]
                        best_at = y * wp + x
                        for i in range(k):
                            for j in range(k):
                                v = xp[n, ch, y + i, x + j]
                                if v > best:
                                    best = v
                                    best_at = (y + i) * wp + x + j
                        o[n, ch, oy, ox] = best
                        a[n, ch, oy, ox] = best_at
    return out, idx


def maxpool_backward(real[:, :, :, ::1] grad, cnp.int64_t[:, :, :, ::1] argmax, Py_ssize_t hp, Py_ssize_t wp):
    cdef Py_ssize_t b = grad.shape[0], c = grad.shape[1], ho = grad.shape[2], wo = grad.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((b, c, hp * wp), dtype=dtype)
    cdef real[:, :, ::1] o = out
    cdef Py_ssize_t n, ch, oy, ox
    with nogil:
        for n in range(b):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        o[n, ch, argmax[n, ch, oy, ox]] += grad[n, ch, oy, ox]
    return out.reshape(b, c, hp, wp)
