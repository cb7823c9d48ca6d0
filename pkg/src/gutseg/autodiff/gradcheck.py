"""Central finite-difference gradient checking.

The analytic side is whatever the float32 engine produced; the reference
is recomputed from 64-bit forwards with a central difference (step 1e-3
by default). Per-element pass criterion:

    |analytic - numeric| <= max(abs_tol, rel_tol * |numeric|)
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .engine import Tape, Tensor, backward

LossFn = Callable[[list[Tensor]], Tensor]


def finite_difference(f: Callable[[list[np.ndarray]], float],
                      arrays: Sequence[np.ndarray], step: float = 1e-3) -> list[np.ndarray]:
    """Central-difference gradients of scalar ``f`` w.r.t. each array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = [np.zeros_like(a) for a in arrays]
    for a, g in zip(arrays, grads):
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            fp = f(arrays)
            flat[i] = saved - step
            fm = f(arrays)
            flat[i] = saved
            gflat[i] = (fp - fm) / (2.0 * step)
    return grads


def analytic_gradients(fn: LossFn, arrays: Sequence[np.ndarray],
                       dtype=np.float32) -> list[np.ndarray]:
    """Run ``fn`` through the engine and return dLoss/dInput per array."""
    tensors = [Tensor(np.asarray(a, dtype=dtype), requires_grad=True) for a in arrays]
    with Tape():
        loss = fn(tensors)
        backward(loss)
    out = []
    for t in tensors:
        out.append(np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64))
    return out


def check_gradients(fn: LossFn, arrays: Sequence[np.ndarray], *,
                    abs_tol: float = 1e-3, rel_tol: float = 1e-2,
                    step: float = 1e-3) -> None:
    """Assert the engine's gradients match 64-bit finite differences.

    ``fn`` maps a list of Tensors to a scalar Tensor and must be
    dtype-agnostic: it is evaluated in float32 for the analytic side and
    float64 for the reference.
    """
    analytic = analytic_gradients(fn, arrays)

    def f64(arrs: list[np.ndarray]) -> float:
        return fn([Tensor(a) for a in arrs]).item()

    numeric = finite_difference(f64, arrays, step=step)
    for which, (got, ref) in enumerate(zip(analytic, numeric)):
        err = np.abs(got - ref)
        allow = np.maximum(abs_tol, rel_tol * np.abs(ref))
        bad = err > allow
        if bad.any():
            i = int(np.argmax(err - allow))
            raise AssertionError(
                f"gradient mismatch on input {which} at flat index {i}: "
                f"analytic={got.reshape(-1)[i]:.6g} numeric={ref.reshape(-1)[i]:.6g} "
                f"(|diff|={err.reshape(-1)[i]:.3g}, allowed={allow.reshape(-1)[i]:.3g})")
