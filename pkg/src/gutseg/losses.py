"""Overlap metric and training losses, in hard and differentiable form.

The optimization targets are blends over two ingredients:

* ``iou``          : 1 - soft IoU
* ``bce_tversky``  : 0.4 * tversky + 0.6 * binary cross-entropy
* ``iou_tversky``  : 0.4 * tversky + 0.6 * (1 - soft IoU)

Soft IoU and Tversky statistics are accumulated per (sample, class)
group when the input is at least 3-d (the last two axes are treated as
spatial), then averaged over groups; 1-d/2-d inputs form a single
group. This keeps small organs from being drowned out by large ones.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .errors import ConfigError, ShapeError

CLASS_NAMES = ("large_bowel", "small_bowel", "stomach")
LOSS_TAGS = ("iou", "bce_tversky", "iou_tversky")

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossKind:
    """Which blend to train with, plus its smoothing knobs."""

    tag: str = "bce_tversky"
    tversky_alpha: float = 0.5
    tversky_beta: float = 0.5
    smooth_eps: float = 1.0

    def __post_init__(self):
        if self.tag not in LOSS_TAGS:
            raise ConfigError(f"unknown loss tag {self.tag!r}; choose from {LOSS_TAGS}")
        if self.tversky_alpha < 0 or self.tversky_beta < 0:
            raise ConfigError("tversky alpha/beta must be non-negative")
        if self.smooth_eps <= 0:
            raise ConfigError("smooth_eps must be positive")


@dataclass(frozen=True)
class MetricReport:
    """Per-class and mean IoU for one evaluation pass."""

    per_class_iou: tuple[float, float, float]
    mean_iou: float
    epoch: int
    split: str

    @classmethod
    def from_per_class(cls, per_class, epoch: int = 0, split: str = "validation"):
        per = tuple(float(v) for v in per_class)
        return cls(per, float(np.mean(per)), epoch, split)


def iou_hard(a: np.ndarray, b: np.ndarray) -> float:
    """|A n B| / |A u B| over boolean masks; both-empty counts as 1.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"iou_hard: mask shapes differ, {a.shape} vs {b.shape}")
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return inter / union


def _spatial_axes(t: Tensor) -> tuple[int, ...]:
    if t.ndim >= 3:
        return (t.ndim - 2, t.ndim - 1)
    return tuple(range(t.ndim))


def _as_pair(pred, truth) -> tuple[Tensor, Tensor]:
    pred = ops.as_tensor(pred)
    truth = ops.as_tensor(truth, dtype=pred.dtype)
    if truth.dtype != pred.dtype:
        truth = Tensor(truth.data.astype(pred.dtype))
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction/truth shapes differ, {pred.shape} vs {truth.shape}")
    return pred, truth


def iou_soft(pred, truth, eps: float = 1.0) -> Tensor:
    """Differentiable IoU: (sum p*t + eps) / (sum p + sum t - sum p*t + eps),
    one term per (sample, class) group, averaged."""
    pred, truth = _as_pair(pred, truth)
    axes = _spatial_axes(pred)
    inter = ops.reduce_sum(ops.mul(pred, truth), axes)
    union = ops.sub(ops.add(ops.reduce_sum(pred, axes), ops.reduce_sum(truth, axes)), inter)
    per_group = ops.div(ops.add(inter, eps), ops.add(union, eps))
    return ops.mean_all(per_group)


def bce(pred, truth) -> Tensor:
    """Mean binary cross-entropy over all elements; predictions are
    clamped to [1e-7, 1 - 1e-7] before the logs."""
    pred, truth = _as_pair(pred, truth)
    p = ops.clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    pos = ops.mul(truth, ops.log(p))
    neg = ops.mul(ops.sub(1.0, truth), ops.log(ops.sub(1.0, p)))
    return ops.mul(ops.mean_all(ops.add(pos, neg)), -1.0)


def tversky_loss(pred, truth, alpha: float = 0.5, beta: float = 0.5,
                 eps: float = 1.0) -> Tensor:
    """1 - (TP + eps) / (TP + alpha*FP + beta*FN + eps) with soft counts,
    per (sample, class) group, averaged. alpha = beta = 0.5 is soft Dice."""
    pred, truth = _as_pair(pred, truth)
    axes = _spatial_axes(pred)
    tp = ops.reduce_sum(ops.mul(pred, truth), axes)
    fp = ops.reduce_sum(ops.mul(pred, ops.sub(1.0, truth)), axes)
    fn = ops.reduce_sum(ops.mul(ops.sub(1.0, pred), truth), axes)
    denom = ops.add(ops.add(tp, ops.mul(fp, alpha)), ops.mul(fn, beta))
    index = ops.div(ops.add(tp, eps), ops.add(denom, eps))
    return ops.mean_all(ops.sub(1.0, index))


def combined_loss(kind: LossKind, pred, truth) -> Tensor:
    """The configured blend; weights are the fixed 0.4/0.6 constants."""
    if kind.tag == "iou":
        return ops.sub(1.0, iou_soft(pred, truth, kind.smooth_eps))
    tv = tversky_loss(pred, truth, kind.tversky_alpha, kind.tversky_beta, kind.smooth_eps)
    if kind.tag == "bce_tversky":
        other = bce(pred, truth)
    else:  # iou_tversky
        other = ops.sub(1.0, iou_soft(pred, truth, kind.smooth_eps))
    return ops.add(ops.mul(tv, 0.4), ops.mul(other, 0.6))


def threshold(probs) -> np.ndarray:
    """Binarize probabilities: p >= 0.5 -> 1, p < 0.5 -> 0."""
    arr = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return arr >= 0.5
