# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled conv-lowering and bilinear kernels (NHWC, float32/float64)."""

import numpy as np
cimport cython
from cython cimport floating
from libc.string cimport memcpy


def im2col(const floating[:, :, :, ::1] xp, int kh, int kw, int stride, int ho, int wo):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n * ho * wo, kh * kw * c), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t b, oh, ow, i, j, row, col
    with nogil:
        for b in range(n):
            for oh in range(ho):
                for ow in range(wo):
                    row = (b * ho + oh) * wo + ow
                    col = 0
                    for i in range(kh):
                        for j in range(kw):
                            memcpy(&out[row, col], &xp[b, oh * stride + i, ow * stride + j, 0],
                                   c * sizeof(floating))
                            col += c
    return out_arr


def col2im(const floating[:, ::1] cols, int n, int hp, int wp, int c, int kh, int kw,
           int stride, int ho, int wo):
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n, hp, wp, c), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, oh, ow, i, j, k, row, base
    # loop order (i, j) outside (oh, ow) keeps the summation order of the numpy fallback
    with nogil:
        for b in range(n):
            for i in range(kh):
                for j in range(kw):
                    base = (i * kw + j) * c
                    for oh in range(ho):
                        for ow in range(wo):
                            row = (b * ho + oh) * wo + ow
                            for k in range(c):
                                out[b, oh * stride + i, ow * stride + j, k] += cols[row, base + k]
    return out_arr


def bilinear(const floating[:, :, :, ::1] x, const long[::1] i0y, const long[::1] i1y, const floating[::1] fy,
             const long[::1] i0x, const long[::1] i1x, const floating[::1] fx):
    cdef Py_ssize_t n = x.shape[0], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = fy.shape[0], wo = fx.shape[0]
    dtype = np.float32 if floating is float else np.float64
    tmp_arr = np.empty((n, ho, w, c), dtype=dtype)
    out_arr = np.empty((n, ho, wo, c), dtype=dtype)
    cdef floating[:, :, :, ::1] tmp = tmp_arr
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, p, q, j, k
    cdef floating g0, g1
    with nogil:
        for b in range(n):
            for p in range(ho):
                g1 = fy[p]
                g0 = 1 - g1
                for j in range(w):
                    for k in range(c):
                        tmp[b, p, j, k] = x[b, i0y[p], j, k] * g0 + x[b, i1y[p], j, k] * g1
            for p in range(ho):
                for q in range(wo):
                    g1 = fx[q]
                    g0 = 1 - g1
                    for k in range(c):
                        out[b, p, q, k] = tmp[b, p, i0x[q], k] * g0 + tmp[b, p, i1x[q], k] * g1
    return out_arr


def bilinear_grad(const floating[:, :, :, ::1] g, int h, int w, const long[::1] i0y, const long[::1] i1y,
                  const floating[::1] fy, const long[::1] i0x, const long[::1] i1x, const floating[::1] fx):
    cdef Py_ssize_t n = g.shape[0], ho = g.shape[1], wo = g.shape[2], c = g.shape[3]
    dtype = np.float32 if floating is float else np.float64
    dtmp_arr = np.zeros((n, ho, w, c), dtype=dtype)
    dx_arr = np.zeros((n, h, w, c), dtype=dtype)
    cdef floating[:, :, :, ::1] dtmp = dtmp_arr
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, p, q, j, k
    cdef floating g0, g1
    with nogil:
        for b in range(n):
            for p in range(ho):
                for q in range(wo):
                    g1 = fx[q]
                    g0 = 1 - g1
                    for k in range(c):
                        dtmp[b, p, i0x[q], k] += g[b, p, q, k] * g0
                        dtmp[b, p, i1x[q], k] += g[b, p, q, k] * g1
            for p in range(ho):
                g1 = fy[p]
                g0 = 1 - g1
                for j in range(w):
                    for k in range(c):
                        dx[b, i0y[p], j, k] += dtmp[b, p, j, k] * g0
                        dx[b, i1y[p], j, k] += dtmp[b, p, j, k] * g1
    return dx_arr
