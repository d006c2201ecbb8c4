# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_kernels_py``.

Same contracts, same element-level accumulation order (kernel row, then
kernel column), so results are bit-identical to the NumPy fallback.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int kh, int kw, int sh, int sw,
           int dh, int dw, int ph, int pw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    cdef Py_ssize_t wo = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    if real is float:
        out_arr = np.zeros((n, c * kh * kw, ho * wo), dtype=np.float32)
    else:
        out_arr = np.zeros((n, c * kh * kw, ho * wo), dtype=np.float64)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t ni, ci, i, j, oh, ow, ih, iw, row
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ci * kh + i) * kw + j
                        for oh in range(ho):
                            ih = i * dh + oh * sh - ph
                            if ih < 0 or ih >= h:
                                continue
                            for ow in range(wo):
                                iw = j * dw + ow * sw - pw
                                if 0 <= iw < w:
                                    out[ni, row, oh * wo + ow] = x[ni, ci, ih, iw]
    return out_arr


def col2im(real[:, :, ::1] cols, int h, int w, int kh, int kw, int sh, int sw,
           int dh, int dw, int ph, int pw, int ho, int wo):
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t c = cols.shape[1] // (kh * kw)
    if real is float:
        out_arr = np.zeros((n, c, h, w), dtype=np.float32)
    else:
        out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ni, ci, i, j, oh, ow, ih, iw, row
    with nogil:
        for i in range(kh):
            for j in range(kw):
                for ni in range(n):
                    for ci in range(c):
                        row = (ci * kh + i) * kw + j
                        for oh in range(ho):
                            ih = i * dh + oh * sh - ph
                            if ih < 0 or ih >= h:
                                continue
                            for ow in range(wo):
                                iw = j * dw + ow * sw - pw
                                if 0 <= iw < w:
                                    out[ni, ci, ih, iw] += cols[ni, row, oh * wo + ow]
    return out_arr


def maxpool2_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = w // 2
    if real is float:
        y_arr = np.empty((n, c, ho, wo), dtype=np.float32)
    else:
        y_arr = np.empty((n, c, ho, wo), dtype=np.float64)
    idx_arr = np.empty((n, c, ho, wo), dtype=np.uint8)
    cdef real[:, :, :, ::1] y = y_arr
    cdef unsigned char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t ni, ci, oh, ow, k
    cdef real best, v
    cdef unsigned char bk
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        best = x[ni, ci, 2 * oh, 2 * ow]
                        bk = 0
                        for k in range(1, 4):
                            v = x[ni, ci, 2 * oh + (k >> 1), 2 * ow + (k & 1)]
                            if v > best:
                                best = v
                                bk = <unsigned char> k
                        y[ni, ci, oh, ow] = best
                        idx[ni, ci, oh, ow] = bk
    return y_arr, idx_arr


def maxpool2_backward(real[:, :, :, ::1] gy, unsigned char[:, :, :, ::1] idx):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    if real is float:
        out_arr = np.zeros((n, c, 2 * ho, 2 * wo), dtype=np.float32)
    else:
        out_arr = np.zeros((n, c, 2 * ho, 2 * wo), dtype=np.float64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ni, ci, oh, ow
    cdef unsigned char k
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        k = idx[ni, ci, oh, ow]
                        out[ni, ci, 2 * oh + (k >> 1), 2 * ow + (k & 1)] = gy[ni, ci, oh, ow]
    return out_arr
