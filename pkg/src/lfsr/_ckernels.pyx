# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Same signatures as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def im2col(double[:, :, :, ::1] xp, int kh, int kw, int stride, int ho, int wo):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    out_arr = np.empty((n * ho * wo, c * kh * kw))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, y, x, ch, i, j, row, col
    with nogil:
        for b in range(n):
            for y in range(ho):
                for x in range(wo):
                    row = (b * ho + y) * wo + x
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                out[row, col] = xp[b, ch, y * stride + i, x * stride + j]
                                col += 1
    return out_arr


def col2im(cols, int n, int c, int hp, int wp, int kh, int kw, int stride, int ho, int wo):
    cdef double[:, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64).reshape(n * ho * wo, c * kh * kw)
    out_arr = np.zeros((n, c, hp, wp))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, y, x, ch, i, j, row, col
    with nogil:
        for b in range(n):
            for y in range(ho):
                for x in range(wo):
                    row = (b * ho + y) * wo + x
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                out[b, ch, y * stride + i, x * stride + j] += cv[row, col]
                                col += 1
    return out_arr


def nlm(double[:, ::1] padded, int height, int width, int half_patch, int half_search,
        double h, double sigma_n):
    cdef int p = half_patch + half_search
    cdef int k = 2 * half_patch + 1
    cdef int eh = height + 2 * half_patch, ew = width + 2 * half_patch
    cdef double kk = k * k
    cdef double bias = 2.0 * sigma_n * sigma_n
    cdef double inv_h2 = 1.0 / (h * h)
    acc_arr = np.zeros((height, width))
    wsum_arr = np.zeros((height, width))
    # integral image with a leading zero row/column
    s_arr = np.zeros((eh + 1, ew + 1))
    cdef double[:, ::1] acc = acc_arr
    cdef double[:, ::1] wsum = wsum_arr
    cdef double[:, ::1] s = s_arr
    cdef int y, x, dy, dx, hs = half_search
    cdef double diff, d2, w
    with nogil:
        for dy in range(-hs, hs + 1):
            for dx in range(-hs, hs + 1):
                # column-wise running sums first, then along rows
                for y in range(eh):
                    for x in range(ew):
                        diff = padded[hs + y, hs + x] - padded[hs + dy + y, hs + dx + x]
                        s[y + 1, x + 1] = s[y, x + 1] + diff * diff
                for y in range(1, eh + 1):
                    for x in range(1, ew + 1):
                        s[y, x] = s[y, x - 1] + s[y, x]
                for y in range(height):
                    for x in range(width):
                        d2 = (s[y + k, x + k] - s[y, x + k] - s[y + k, x] + s[y, x]) / kk - bias
                        if d2 < 0.0:
                            d2 = 0.0
                        w = exp(-d2 * inv_h2)
                        acc[y, x] += w * padded[p + y + dy, p + x + dx]
                        wsum[y, x] += w
        for y in range(height):
            for x in range(width):
                acc[y, x] = acc[y, x] / wsum[y, x]
    return acc_arr
