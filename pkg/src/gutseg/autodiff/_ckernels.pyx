# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled conv/pool hot kernels.

Same call surface as ``gutseg.autodiff._pykernels``; direct loop nests
instead of im2col, specialised for float32/float64 via fused types. All
accumulation orders are fixed, so results are bit-identical from run to
run.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


cdef inline Py_ssize_t _lo(Py_ssize_t tap, Py_ssize_t padding, Py_ssize_t stride) nogil:
    # smallest output index whose input index >= 0
    if tap >= padding:
        return 0
    return (padding - tap + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t tap, Py_ssize_t padding, Py_ssize_t stride,
                           Py_ssize_t n_in, Py_ssize_t n_out) nogil:
    # one past the largest output index whose input index < n_in
    cdef Py_ssize_t h = (n_in - 1 - tap + padding) // stride + 1
    if h > n_out:
        return n_out
    return h


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] k,
                   int stride, int padding):
    cdef Py_ssize_t b = x.shape[0], cin = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t cout = k.shape[0], kh = k.shape[2], kw = k.shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * padding - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.zeros((b, cout, oh, ow), dtype=dtype)
    cdef floating[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t bi, co, ci, i, j, r, c, ih, r0, r1, c0, c1
    cdef floating wv
    with nogil:
        for bi in range(b):
            for co in range(cout):
                for ci in range(cin):
                    for i in range(kh):
                        r0 = _lo(i, padding, stride)
                        r1 = _hi(i, padding, stride, h, oh)
                        for j in range(kw):
                            wv = k[co, ci, i, j]
                            c0 = _lo(j, padding, stride)
                            c1 = _hi(j, padding, stride, w, ow)
                            for r in range(r0, r1):
                                ih = r * stride + i - padding
                                for c in range(c0, c1):
                                    y[bi, co, r, c] += wv * x[bi, ci, ih, c * stride + j - padding]
    return y_arr


def conv2d_backward_input(floating[:, :, :, ::1] gy, floating[:, :, :, ::1] k,
                          int stride, int padding, int h, int w):
    cdef Py_ssize_t b = gy.shape[0], cout = gy.shape[1], oh = gy.shape[2], ow = gy.shape[3]
    cdef Py_ssize_t cin = k.shape[1], kh = k.shape[2], kw = k.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((b, cin, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t bi, co, ci, i, j, r, c, ih, r0, r1, c0, c1
    cdef floating wv
    with nogil:
        for bi in range(b):
            for co in range(cout):
                for ci in range(cin):
                    for i in range(kh):
                        r0 = _lo(i, padding, stride)
                        r1 = _hi(i, padding, stride, h, oh)
                        for j in range(kw):
                            wv = k[co, ci, i, j]
                            c0 = _lo(j, padding, stride)
                            c1 = _hi(j, padding, stride, w, ow)
                            for r in range(r0, r1):
                                ih = r * stride + i - padding
                                for c in range(c0, c1):
                                    gx[bi, ci, ih, c * stride + j - padding] += wv * gy[bi, co, r, c]
    return gx_arr


def conv2d_backward_kernel(floating[:, :, :, ::1] gy, floating[:, :, :, ::1] x,
                           int stride, int padding, int kh, int kw):
    cdef Py_ssize_t b = gy.shape[0], cout = gy.shape[1], oh = gy.shape[2], ow = gy.shape[3]
    cdef Py_ssize_t cin = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gk_arr = np.zeros((cout, cin, kh, kw), dtype=dtype)
    cdef floating[:, :, :, ::1] gk = gk_arr
    cdef Py_ssize_t bi, co, ci, i, j, r, c, ih, r0, r1, c0, c1
    cdef floating acc
    with nogil:
        for bi in range(b):
            for co in range(cout):
                for ci in range(cin):
                    for i in range(kh):
                        r0 = _lo(i, padding, stride)
                        r1 = _hi(i, padding, stride, h, oh)
                        for j in range(kw):
                            c0 = _lo(j, padding, stride)
                            c1 = _hi(j, padding, stride, w, ow)
                            acc = 0
                            for r in range(r0, r1):
                                ih = r * stride + i - padding
                                for c in range(c0, c1):
                                    acc += gy[bi, co, r, c] * x[bi, ci, ih, c * stride + j - padding]
                            gk[co, ci, i, j] += acc
    return gk_arr


def depthwise_forward(floating[:, :, :, ::1] x, floating[:, :, ::1] k,
                      int stride, int padding):
    cdef Py_ssize_t b = x.shape[0], ch = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t kh = k.shape[1], kw = k.shape[2]
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * padding - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.zeros((b, ch, oh, ow), dtype=dtype)
    cdef floating[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t bi, ci, i, j, r, c, ih, r0, r1, c0, c1
    cdef floating wv
    with nogil:
        for bi in range(b):
            for ci in range(ch):
                for i in range(kh):
                    r0 = _lo(i, padding, stride)
                    r1 = _hi(i, padding, stride, h, oh)
                    for j in range(kw):
                        wv = k[ci, i, j]
                        c0 = _lo(j, padding, stride)
                        c1 = _hi(j, padding, stride, w, ow)
                        for r in range(r0, r1):
                            ih = r * stride + i - padding
                            for c in range(c0, c1):
                                y[bi, ci, r, c] += wv * x[bi, ci, ih, c * stride + j - padding]
    return y_arr


def depthwise_backward_input(floating[:, :, :, ::1] gy, floating[:, :, ::1] k,
                             int stride, int padding, int h, int w):
    cdef Py_ssize_t b = gy.shape[0], ch = gy.shape[1], oh = gy.shape[2], ow = gy.shape[3]
    cdef Py_ssize_t kh = k.shape[1], kw = k.shape[2]
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((b, ch, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t bi, ci, i, j, r, c, ih, r0, r1, c0, c1
    cdef floating wv
    with nogil:
        for bi in range(b):
            for ci in range(ch):
                for i in range(kh):
                    r0 = _lo(i, padding, stride)
                    r1 = _hi(i, padding, stride, h, oh)
                    for j in range(kw):
                        wv = k[ci, i, j]
                        c0 = _lo(j, padding, stride)
                        c1 = _hi(j, padding, stride, w, ow)
                        for r in range(r0, r1):
                            ih = r * stride + i - padding
                            for c in range(c0, c1):
                                gx[bi, ci, ih, c * stride + j - padding] += wv * gy[bi, ci, r, c]
    return gx_arr


def depthwise_backward_kernel(floating[:, :, :, ::1] gy, floating[:, :, :, ::1] x,
                              int stride, int padding, int kh, int kw):
    cdef Py_ssize_t b = gy.shape[0], ch = gy.shape[1], oh = gy.shape[2], ow = gy.shape[3]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gk_arr = np.zeros((ch, kh, kw), dtype=dtype)
    cdef floating[:, :, ::1] gk = gk_arr
    cdef Py_ssize_t bi, ci, i, j, r, c, ih, r0, r1, c0, c1
    cdef floating acc
    with nogil:
        for bi in range(b):
            for ci in range(ch):
                for i in range(kh):
                    r0 = _lo(i, padding, stride)
                    r1 = _hi(i, padding, stride, h, oh)
                    for j in range(kw):
                        c0 = _lo(j, padding, stride)
                        c1 = _hi(j, padding, stride, w, ow)
                        acc = 0
                        for r in range(r0, r1):
                            ih = r * stride + i - padding
                            for c in range(c0, c1):
                                acc += gy[bi, ci, r, c] * x[bi, ci, ih, c * stride + j - padding]
                        gk[ci, i, j] += acc
    return gk_arr


def maxpool2d_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t b = x.shape[0], ch = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = h // 2, ow = w // 2
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((b, ch, oh, ow), dtype=dtype)
    idx_arr = np.empty((b, ch, oh, ow), dtype=np.int64)
    cdef floating[:, :, :, ::1] y = y_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t bi, ci, r, c, i, j, ih, iw, best_i, best_j
    cdef floating best, v
    with nogil:
        for bi in range(b):
            for ci in range(ch):
                for r in range(oh):
                    for c in range(ow):
                        best = x[bi, ci, 2 * r, 2 * c]
                        best_i = 2 * r
                        best_j = 2 * c
                        for i in range(2):
                            for j in range(2):
                                ih = 2 * r + i
                                iw = 2 * c + j
                                v = x[bi, ci, ih, iw]
                                if v > best:  # strict: first max in scan order wins
                                    best = v
                                    best_i = ih
                                    best_j = iw
                        y[bi, ci, r, c] = best
                        idx[bi, ci, r, c] = best_i * w + best_j
    return y_arr, idx_arr


def maxpool2d_backward(floating[:, :, :, ::1] gy, cnp.int64_t[:, :, :, ::1] idx,
                       int h, int w):
    cdef Py_ssize_t b = gy.shape[0], ch = gy.shape[1], oh = gy.shape[2], ow = gy.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((b, ch, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t bi, ci, r, c
    cdef cnp.int64_t fl
    with nogil:
        for bi in range(b):
            for ci in range(ch):
                for r in range(oh):
                    for c in range(ow):
                        fl = idx[bi, ci, r, c]
                        gx[bi, ci, fl // w, fl % w] += gy[bi, ci, r, c]
    return gx_arr
