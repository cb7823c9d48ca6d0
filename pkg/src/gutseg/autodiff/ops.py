"""Differentiable operations: exactly the set a U-Net pipeline needs.

Every op validates shapes, computes its forward value through numpy or
the active kernel backend, and (when a tape is active and some input
requires grad) records a pull-back closure. No op ever mutates an input
tensor's data array.

Convolution follows the cross-correlation convention (no kernel flip).
Kernel layouts: conv2d ``(out_ch, in_ch, kh, kw)``, conv_transpose2d
``(in_ch, out_ch, kh, kw)``, depthwise ``(channels, 1, kh, kw)``. Under
these layouts conv_transpose2d is the exact adjoint of conv2d at padding
0, i.e. ``<conv2d(x, k), y> == <x, conv_transpose2d(y, k)>``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from ..errors import ShapeError
from . import kernels
from .engine import Tensor, accumulate, record, recording

Scalar = Union[int, float]


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)
    return t


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: operand dtypes differ, {a.dtype} vs {b.dtype}")


def _check_positive_dims(t: Tensor, op: str) -> None:
    if any(d <= 0 for d in t.shape):
        raise ShapeError(f"{op}: zero-size dimension in shape {t.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_same_shape(a, b, "add")
        out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)
        if recording(out):
            def pull():
                if out.grad is None:
                    return
                accumulate(a, out.grad)
                accumulate(b, out.grad)
            record(out, pull)
        return out
    if isinstance(b, Tensor):
        a, b = b, a
    out = Tensor(a.data + b, a.requires_grad)
    if recording(out):
        def pull():
            if out.grad is None:
                return
            accumulate(a, out.grad)
        record(out, pull)
    return out


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_same_shape(a, b, "sub")
        out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)
        if recording(out):
            def pull():
                if out.grad is None:
                    return
                accumulate(a, out.grad)
                accumulate(b, -out.grad)
            record(out, pull)
        return out
    if isinstance(a, Tensor):  # tensor - scalar
        out = Tensor(a.data - b, a.requires_grad)
        if recording(out):
            def pull():
                if out.grad is None:
                    return
                accumulate(a, out.grad)
            record(out, pull)
        return out
    # scalar - tensor
    out = Tensor(a - b.data, b.requires_grad)
    if recording(out):
        def pull():
            if out.grad is None:
                return
            accumulate(b, -out.grad)
        record(out, pull)
    return out


def mul(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")
        out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)
        if recording(out):
            def pull():
                if out.grad is None:
                    return
                accumulate(a, out.grad * b.data)
                accumulate(b, out.grad * a.data)
            record(out, pull)
        return out
    if isinstance(b, Tensor):
        a, b = b, a
    out = Tensor(a.data * b, a.requires_grad)
    if recording(out):
        def pull():
            if out.grad is None:
                return
            accumulate(a, out.grad * b)
        record(out, pull)
    return out


def div(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_same_shape(a, b, "div")
        out = Tensor(a.data / b.data, a.requires_grad or b.requires_grad)
        if recording(out):
            def pull():
                if out.grad is None:
                    return
                accumulate(a, out.grad / b.data)
                accumulate(b, -out.grad * a.data / (b.data * b.data))
            record(out, pull)
        return out
    if isinstance(a, Tensor):  # tensor / scalar
        return mul(a, 1.0 / b)
    # scalar / tensor
    out = Tensor(a / b.data, b.requires_grad)
    if recording(out):
        def pull():
            if out.grad is None:
                return
            accumulate(b, -out.grad * a / (b.data * b.data))
        record(out, pull)
    return out


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data), x.requires_grad)
    if recording(out):
        def pull():
            if out.grad is None:
                return
            accumulate(x, out.grad / x.data)
        record(out, pull)
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip elementwise; gradient passes only strictly inside (lo, hi)."""
    out = Tensor(np.clip(x.data, lo, hi), x.requires_grad)
    if recording(out):
        mask = (x.data > lo) & (x.data < hi)
        def pull():
            if out.grad is None:
                return
            accumulate(x, out.grad * mask)
        record(out, pull)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), x.requires_grad)
    if recording(out):
        mask = x.data > 0
        def pull():
            if out.grad is None:
                return
            accumulate(x, out.grad * mask)
        record(out, pull)
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y, x.requires_grad)
    if recording(out):
        def pull():
            if out.grad is None:
                return
            accumulate(x, out.grad * y * (1.0 - y))
        record(out, pull)
    return out


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Sum over ``axes`` (all axes when None); dims are dropped."""
    if axes is None:
        norm = tuple(range(x.ndim))
    else:
        norm = tuple(sorted(a % x.ndim for a in axes))
        if len(set(norm)) != len(norm):
            raise ShapeError(f"reduce_sum: repeated axis in {axes}")
    out = Tensor(x.data.sum(axis=norm), x.requires_grad)
    if recording(out):
        kept = [1 if i in norm else d for i, d in enumerate(x.shape)]
        def pull():
            if out.grad is None:
                return
            g = np.broadcast_to(out.grad.reshape(kept), x.shape)
            accumulate(x, g)
        record(out, pull)
    return out


def mean_all(x: Tensor) -> Tensor:
    return mul(reduce_sum(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# structure


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack along the channel axis of two (B, C, H, W) tensors."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat_channels: need 4-d tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels: batch/spatial dims differ, {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"concat_channels: dtypes differ, {a.dtype} vs {b.dtype}")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1), a.requires_grad or b.requires_grad)
    if recording(out):
        def pull():
            if out.grad is None:
                return
            accumulate(a, out.grad[:, :ca])
            accumulate(b, out.grad[:, ca:])
        record(out, pull)
    return out


# ---------------------------------------------------------------------------
# convolution / pooling


def _contig(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B, Cin, H, W) with (Cout, Cin, kH, kW)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and kernel, got {x.shape}, {kernel.shape}")
    _check_positive_dims(x, "conv2d")
    _check_positive_dims(kernel, "conv2d")
    b_, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: kernel expects {kcin} input channels, input has {cin}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}")

    y = kernels.impl.conv2d_forward(x.data, kernel.data, stride, padding)
    if bias is not None:
        y = y + bias.data.reshape(1, cout, 1, 1)
    req = x.requires_grad or kernel.requires_grad or (bias is not None and bias.requires_grad)
    out = Tensor(y, req)
    if recording(out):
        def pull():
            if out.grad is None:
                return
            g = _contig(out.grad)
            if x.requires_grad:
                accumulate(x, kernels.impl.conv2d_backward_input(
                    g, kernel.data, stride, padding, h, w))
            if kernel.requires_grad:
                accumulate(kernel, kernels.impl.conv2d_backward_kernel(
                    g, x.data, stride, padding, kh, kw))
            if bias is not None and bias.requires_grad:
                accumulate(bias, g.sum(axis=(0, 2, 3)))
        record(out, pull)
    return out


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 2) -> Tensor:
    """Fractionally-strided scatter: (B, Cin, H, W) x (Cin, Cout, kH, kW)
    -> (B, Cout, (H-1)*stride + kH, (W-1)*stride + kW)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv_transpose2d: need 4-d input and kernel, got {x.shape}, {kernel.shape}")
    _check_positive_dims(x, "conv_transpose2d")
    _check_positive_dims(kernel, "conv_transpose2d")
    b_, cin, h, w = x.shape
    kcin, cout, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(
            f"conv_transpose2d: kernel expects {kcin} input channels, input has {cin}")
    if stride < 1:
        raise ShapeError(f"conv_transpose2d: stride must be positive, got {stride}")
    oh = (h - 1) * stride + kh
    ow = (w - 1) * stride + kw
    # scatter-accumulate == input-gradient of the matching conv2d
    y = kernels.impl.conv2d_backward_input(x.data, kernel.data, stride, 0, oh, ow)
    out = Tensor(y, x.requires_grad or kernel.requires_grad)
    if recording(out):
        def pull():
            if out.grad is None:
                return
            g = _contig(out.grad)
            if x.requires_grad:
                accumulate(x, kernels.impl.conv2d_forward(g, kernel.data, stride, 0))
            if kernel.requires_grad:
                accumulate(kernel, kernels.impl.conv2d_backward_kernel(
                    x.data, g, stride, 0, kh, kw))
        record(out, pull)
    return out


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 1) -> Tensor:
    """Per-channel convolution with a (C, 1, kH, kW) kernel."""
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[1] != 1:
        raise ShapeError(
            f"depthwise_conv2d: need (B,C,H,W) and (C,1,kH,kW), got {x.shape}, {kernel.shape}")
    if kernel.shape[0] != x.shape[1]:
        raise ShapeError(
            f"depthwise_conv2d: kernel has {kernel.shape[0]} channels, input has {x.shape[1]}")
    _, c, h, w = x.shape
    kh, kw = kernel.shape[2:]
    if bias is not None and bias.shape != (c,):
        raise ShapeError(f"depthwise_conv2d: bias shape {bias.shape} != ({c},)")
    kflat = _contig(kernel.data[:, 0])
    y = kernels.impl.depthwise_forward(x.data, kflat, stride, padding)
    if bias is not None:
        y = y + bias.data.reshape(1, c, 1, 1)
    req = x.requires_grad or kernel.requires_grad or (bias is not None and bias.requires_grad)
    out = Tensor(y, req)
    if recording(out):
        def pull():
            if out.grad is None:
                return
            g = _contig(out.grad)
            if x.requires_grad:
                accumulate(x, kernels.impl.depthwise_backward_input(
                    g, kflat, stride, padding, h, w))
            if kernel.requires_grad:
                gk = kernels.impl.depthwise_backward_kernel(g, x.data, stride, padding, kh, kw)
                accumulate(kernel, gk[:, None])
            if bias is not None and bias.requires_grad:
                accumulate(bias, g.sum(axis=(0, 2, 3)))
        record(out, pull)
    return out


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; gradient flows to the argmax cell
    (ties resolved to the first element in row-major scan order)."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: need a 4-d tensor, got {x.shape}")
    _, _, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(
            f"maxpool2d: spatial dims must be even, got {h}x{w}; pad the input first")
    y, idx = kernels.impl.maxpool2d_forward(x.data)
    out = Tensor(y, x.requires_grad)
    if recording(out):
        def pull():
            if out.grad is None:
                return
            accumulate(x, kernels.impl.maxpool2d_backward(_contig(out.grad), idx, h, w))
        record(out, pull)
    return out


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class RunningStats:
    """Per-channel running mean/variance used when batchnorm runs in
    eval mode. Updated in place during training forwards."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def create(cls, channels: int) -> "RunningStats":
        return cls(mean=np.zeros(channels, dtype=np.float32),
                   var=np.ones(channels, dtype=np.float32))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Channel-wise batch normalization over a (B, C, H, W) tensor.

    Training mode normalizes with batch statistics (biased variance) and
    folds them into ``stats``; eval mode normalizes with ``stats`` only.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: need a 4-d tensor, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm2d: gamma/beta must have shape ({c},), got {gamma.shape}, {beta.shape}")
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(1, c, 1, 1)
        var = (xc * xc).mean(axis=axes)
        stats.mean[:] = (1.0 - momentum) * stats.mean + momentum * mu
        stats.var[:] = (1.0 - momentum) * stats.var + momentum * var
    else:
        mu = stats.mean.astype(x.dtype)
        var = stats.var.astype(x.dtype)
        xc = x.data - mu.reshape(1, c, 1, 1)
    inv = 1.0 / np.sqrt(var + eps)
    inv4 = inv.reshape(1, c, 1, 1)
    xhat = xc * inv4
    y = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    out = Tensor(y, x.requires_grad or gamma.requires_grad or beta.requires_grad)
    if recording(out):
        def pull():
            if out.grad is None:
                return
            g = out.grad
            if gamma.requires_grad:
                accumulate(gamma, (g * xhat).sum(axis=axes))
            if beta.requires_grad:
                accumulate(beta, g.sum(axis=axes))
            if not x.requires_grad:
                return
            gxhat = g * gamma.data.reshape(1, c, 1, 1)
            if training:
                gvar = (gxhat * xc).sum(axis=axes) * (-0.5) * inv ** 3
                gmu = (-(gxhat.sum(axis=axes)) * inv
                       + gvar * (-2.0 / n) * xc.sum(axis=axes))
                gx = (gxhat * inv4
                      + (gvar.reshape(1, c, 1, 1) * 2.0 / n) * xc
                      + gmu.reshape(1, c, 1, 1) / n)
            else:
                gx = gxhat * inv4
            accumulate(x, gx)
        record(out, pull)
    return out
