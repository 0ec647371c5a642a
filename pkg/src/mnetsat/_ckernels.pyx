# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sliding-window kernels; same contracts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int kh, int kw, int stride, int dilation, int ho, int wo):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, ho, wo, kh, kw, c), dtype=dtype)
    cdef real[:, :, :, :, :, ::1] o = out
    cdef Py_ssize_t b, y, x, i, j, ch, r, q
    with nogil:
        for b in range(n):
            for y in range(ho):
                for x in range(wo):
                    for i in range(kh):
                        r = y * stride + i * dilation
                        for j in range(kw):
                            q = x * stride + j * dilation
                            for ch in range(c):
                                o[b, y, x, i, j, ch] = xp[b, r, q, ch]
    return out


def col2im(real[:, :, :, :, :, ::1] cols, int hp, int wp, int stride, int dilation):
    cdef Py_ssize_t n = cols.shape[0], ho = cols.shape[1], wo = cols.shape[2]
    cdef Py_ssize_t kh = cols.shape[3], kw = cols.shape[4], c = cols.shape[5]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, hp, wp, c), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t b, y, x, i, j, ch, r, q
    with nogil:
        for b in range(n):
            for y in range(ho):
                for x in range(wo):
                    for i in range(kh):
                        r = y * stride + i * dilation
                        for j in range(kw):
                            q = x * stride + j * dilation
                            for ch in range(c):
                                o[b, r, q, ch] += cols[b, y, x, i, j, ch]
    return out


def maxpool_forward(real[:, :, :, ::1] xp, int k, int stride, int ho, int wo):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, ho, wo, c), dtype=dtype)
    arg = np.empty((n, ho, wo, c), dtype=np.int32)
    cdef real[:, :, :, ::1] o = out
    cdef int[:, :, :, ::1] a = arg
    cdef Py_ssize_t b, y, x, i, j, ch
    cdef real best, v
    cdef int besti
    with nogil:
        for b in range(n):
            for y in range(ho):
                for x in range(wo):
                    for ch in range(c):
                        best = xp[b, y * stride, x * stride, ch]
                        besti = 0
                        for i in range(k):
                            for j in range(k):
                                v = xp[b, y * stride + i, x * stride + j, ch]
                                if v > best:
                                    best = v
                                    besti = i * k + j
                        o[b, y, x, ch] = best
                        a[b, y, x, ch] = besti
    return out, arg


def maxpool_backward(real[:, :, :, ::1] g, int[:, :, :, ::1] argmax, int hp, int wp, int k, int stride):
    cdef Py_ssize_t n = g.shape[0], ho = g.shape[1], wo = g.shape[2], c = g.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, hp, wp, c), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t b, y, x, ch
    cdef int t
    with nogil:
        for b in range(n):
            for y in range(ho):
                for x in range(wo):
                    for ch in range(c):
                        t = argmax[b, y, x, ch]
                        o[b, y * stride + t // k, x * stride + t % k, ch] += g[b, y, x, ch]
    return out
