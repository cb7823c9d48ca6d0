"""numpy implementations of the conv/pool hot kernels.

This is the no-compilation fallback for ``gutseg.autodiff._ckernels``
with an identical call surface (see ``gutseg.autodiff.kernels``).
Convolutions go through im2col + BLAS matmul; scatter passes loop only
over the kernel window so every array sweep stays vectorized. The
accumulation order is fixed, so repeated runs are bit-identical.
"""
from __future__ import annotations

import numpy as np


def _pad2d(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _im2col(xp, kh, kw, stride, oh, ow):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols


def _col2im(cols, h, w, stride, padding):
    b, c, kh, kw, oh, ow = cols.shape
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if padding:
        xp = xp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(xp)


def conv2d_forward(x, k, stride, padding):
    _, _, h, w = x.shape
    _, _, kh, kw = k.shape
    oh = _out_size(h, kh, stride, padding)
    ow = _out_size(w, kw, stride, padding)
    cols = _im2col(_pad2d(x, padding), kh, kw, stride, oh, ow)
    y = np.tensordot(k, cols, axes=([1, 2, 3], [1, 2, 3]))  # (cout, b, oh, ow)
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3))


def conv2d_backward_input(gy, k, stride, padding, h, w):
    gcols = np.tensordot(k, gy, axes=([0], [1]))  # (cin, kh, kw, b, oh, ow)
    gcols = np.moveaxis(gcols, 3, 0)
    return _col2im(gcols, h, w, stride, padding)


def conv2d_backward_kernel(gy, x, stride, padding, kh, kw):
    _, _, oh, ow = gy.shape
    cols = _im2col(_pad2d(x, padding), kh, kw, stride, oh, ow)
    gk = np.tensordot(gy, cols, axes=([0, 2, 3], [0, 4, 5]))  # (cout, cin, kh, kw)
    return np.ascontiguousarray(gk)


def depthwise_forward(x, k, stride, padding):
    _, _, h, w = x.shape
    _, kh, kw = k.shape
    oh = _out_size(h, kh, stride, padding)
    ow = _out_size(w, kw, stride, padding)
    cols = _im2col(_pad2d(x, padding), kh, kw, stride, oh, ow)
    return np.ascontiguousarray(np.einsum("bcijhw,cij->bchw", cols, k))


def depthwise_backward_input(gy, k, stride, padding, h, w):
    gcols = np.einsum("bchw,cij->bcijhw", gy, k)
    return _col2im(gcols, h, w, stride, padding)


def depthwise_backward_kernel(gy, x, stride, padding, kh, kw):
    _, _, oh, ow = gy.shape
    cols = _im2col(_pad2d(x, padding), kh, kw, stride, oh, ow)
    return np.ascontiguousarray(np.einsum("bchw,bcijhw->cij", gy, cols))


def maxpool2d_forward(x):
    b, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    win = x.reshape(b, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, 4)
    sel = win.argmax(axis=4)  # first max in row-major window scan order
    y = np.take_along_axis(win, sel[..., None], axis=4)[..., 0]
    oh_idx = np.arange(oh).reshape(1, 1, oh, 1)
    ow_idx = np.arange(ow).reshape(1, 1, 1, ow)
    flat = (oh_idx * 2 + sel // 2) * w + (ow_idx * 2 + sel % 2)
    return np.ascontiguousarray(y), np.ascontiguousarray(flat.astype(np.int64))


def maxpool2d_backward(gy, idx, h, w):
    b, c, oh, ow = gy.shape
    gx = np.zeros((b, c, h * w), dtype=gy.dtype)
    # windows are disjoint, so every target cell is written at most once
    np.put_along_axis(gx, idx.reshape(b, c, oh * ow), gy.reshape(b, c, oh * ow), axis=2)
    return gx.reshape(b, c, h, w)
