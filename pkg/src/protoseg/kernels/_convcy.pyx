# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel lane: typed loops for 3x3 convolution and 2x2 max-pooling.

Shares the call signatures of the NumPy lane. Inner loops run over the
contiguous width axis so the C compiler can vectorize them.
"""

import numpy as np

cimport cython

BACKEND = "compiled"

ctypedef fused real:
    float
    double


cdef inline object _dtype_of(real x):
    if real is float:
        return np.float32
    return np.float64


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] kernel, real[::1] bias):
    cdef Py_ssize_t b = x.shape[0], cin = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t cout = kernel.shape[0]
    out_arr = np.empty((b, cout, h, w), dtype=_dtype_of(x[0, 0, 0, 0]))
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bb, co, ci, kh, kw, oh, ow, oh0, oh1, ow0, ow1, ih
    cdef real wv, bv
    for bb in range(b):
        for co in range(cout):
            bv = bias[co]
            for oh in range(h):
                for ow in range(w):
                    out[bb, co, oh, ow] = bv
            for ci in range(cin):
                for kh in range(3):
                    oh0 = 1 if kh == 0 else 0
                    oh1 = h - 1 if kh == 2 else h
                    for kw in range(3):
                        ow0 = 1 if kw == 0 else 0
                        ow1 = w - 1 if kw == 2 else w
                        wv = kernel[co, ci, kh, kw]
                        for oh in range(oh0, oh1):
                            ih = oh + kh - 1
                            for ow in range(ow0, ow1):
                                out[bb, co, oh, ow] += wv * x[bb, ci, ih, ow + kw - 1]
    return out_arr


def conv2d_backward(real[:, :, :, ::1] x, real[:, :, :, ::1] kernel,
                    real[:, :, :, ::1] gout):
    cdef Py_ssize_t b = x.shape[0], cin = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t cout = kernel.shape[0]
    dtype = _dtype_of(x[0, 0, 0, 0])
    gx_arr = np.zeros((b, cin, h, w), dtype=dtype)
    gk_arr = np.zeros((cout, cin, 3, 3), dtype=dtype)
    gb_arr = np.zeros(cout, dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef real[:, :, :, ::1] gk = gk_arr
    cdef real[::1] gb = gb_arr
    cdef Py_ssize_t bb, co, ci, kh, kw, oh, ow, oh0, oh1, ow0, ow1, ih
    cdef real wv, acc
    for bb in range(b):
        for co in range(cout):
            acc = 0
            for oh in range(h):
                for ow in range(w):
                    acc += gout[bb, co, oh, ow]
            gb[co] += acc
            for ci in range(cin):
                for kh in range(3):
                    oh0 = 1 if kh == 0 else 0
                    oh1 = h - 1 if kh == 2 else h
                    for kw in range(3):
                        ow0 = 1 if kw == 0 else 0
                        ow1 = w - 1 if kw == 2 else w
                        wv = kernel[co, ci, kh, kw]
                        acc = 0
                        for oh in range(oh0, oh1):
                            ih = oh + kh - 1
                            for ow in range(ow0, ow1):
                                acc += gout[bb, co, oh, ow] * x[bb, ci, ih, ow + kw - 1]
                                gx[bb, ci, ih, ow + kw - 1] += wv * gout[bb, co, oh, ow]
                        gk[co, ci, kh, kw] += acc
    return gx_arr, gk_arr, gb_arr


def maxpool_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t h2 = h // 2, w2 = w // 2
    out_arr = np.empty((b, c, h2, w2), dtype=_dtype_of(x[0, 0, 0, 0]))
    idx_arr = np.empty((b, c, h2, w2), dtype=np.int8)
    cdef real[:, :, :, ::1] out = out_arr
    cdef signed char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t bb, cc, i, j, dy, dx
    cdef real best, v
    cdef signed char pos
    for bb in range(b):
        for cc in range(c):
            for i in range(h2):
                for j in range(w2):
                    best = x[bb, cc, 2 * i, 2 * j]
                    pos = 0
                    for dy in range(2):
                        for dx in range(2):
                            v = x[bb, cc, 2 * i + dy, 2 * j + dx]
                            if v > best:
                                best = v
                                pos = <signed char> (2 * dy + dx)
                    out[bb, cc, i, j] = best
                    idx[bb, cc, i, j] = pos
    return out_arr, idx_arr


def maxpool_backward(signed char[:, :, :, ::1] idx, real[:, :, :, ::1] gout):
    cdef Py_ssize_t b = gout.shape[0], c = gout.shape[1]
    cdef Py_ssize_t h2 = gout.shape[2], w2 = gout.shape[3]
    gx_arr = np.zeros((b, c, 2 * h2, 2 * w2), dtype=_dtype_of(gout[0, 0, 0, 0]))
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t bb, cc, i, j
    cdef signed char pos
    for bb in range(b):
        for cc in range(c):
            for i in range(h2):
                for j in range(w2):
                    pos = idx[bb, cc, i, j]
                    gx[bb, cc, 2 * i + pos // 2, 2 * j + pos % 2] = gout[bb, cc, i, j]
    return gx_arr
