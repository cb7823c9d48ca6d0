"""Training loop and evaluation harness.

The recipe: Adam (initial lr 5e-3), cosine-annealed to zero over the
run, batch size 32, 80 epochs, case-level 80/20 split, optional
horizontal/vertical flip augmentation. The loop is single-threaded and
bitwise deterministic for a fixed seed: shuffling, augmentation, and
initialization all derive independent RNG streams from ``(seed, ...)``
keys.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import dataset as dataset_io
from . import preprocess, unet
from .autodiff import Tape, Tensor, backward
from .autodiff.ops import sigmoid
from .errors import ConfigError, DatasetError, TrainingDiverged
from .losses import (CLASS_NAMES, LossKind, MetricReport, combined_loss,
                     iou_hard, threshold)
from .seeding import rng_for


@dataclass(frozen=True)
class TrainConfig:
    """The training recipe; defaults are the reference values."""

    lr_init: float = 5e-3
    epochs: int = 80
    batch_size: int = 32
    split_fraction: float = 0.8
    loss: LossKind = field(default_factory=LossKind)
    augment_flips: bool = True
    seed: int = 0
    lr_min: float = 0.0
    image_size: int = 288  # working grid; desk-scale fixtures use 64

    def __post_init__(self):
        if not (0.0 < self.split_fraction < 1.0):
            raise ConfigError(f"split_fraction must be in (0, 1), got {self.split_fraction}")
        if not (self.lr_init > self.lr_min >= 0.0):
            raise ConfigError(
                f"need lr_init > lr_min >= 0, got {self.lr_init} and {self.lr_min}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.image_size < 1:
            raise ConfigError(f"image_size must be >= 1, got {self.image_size}")


def cosine_lr(t: int, config: TrainConfig) -> float:
    """Half-cosine decay from lr_init (t=0) to lr_min (t=epochs)."""
    if not (0 <= t <= config.epochs):
        raise ConfigError(f"cosine_lr: t must be in [0, {config.epochs}], got {t}")
    return config.lr_min + 0.5 * (config.lr_init - config.lr_min) * (
        1.0 + math.cos(math.pi * (t / config.epochs)))


class Adam:
    """Standard Adam with bias correction over a named parameter map."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ConfigError(f"adam: gradient shape mismatch for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None


def split_dataset(records: Sequence[dataset_io.SliceRecord], fraction: float = 0.8,
                  seed: int = 0):
    """Partition at case granularity: a case's slices never straddle the
    split. Returns (train, validation) record lists in dataset order."""
    if not records:
        raise DatasetError("split_dataset: no records")
    cases = list(dict.fromkeys(r.case_id for r in records))
    if len(cases) < 2:
        raise DatasetError(
            f"split_dataset: need at least 2 cases for a case-level split, got {len(cases)}")
    rng = rng_for(seed, "split")
    order = [cases[i] for i in rng.permutation(len(cases))]
    n_train = min(max(int(len(cases) * fraction), 1), len(cases) - 1)
    train_cases = set(order[:n_train])
    train = [r for r in records if r.case_id in train_cases]
    val = [r for r in records if r.case_id not in train_cases]
    return train, val


# ---------------------------------------------------------------------------
# sample assembly


def load_training_sample(record: dataset_io.SliceRecord, size: int):
    """(normalized image, (3, size, size) float mask stack) for one slice."""
    raw = dataset_io.load_image(record)
    fitted, rec = preprocess.trim_and_pad(raw, size)
    masks = np.stack([
        preprocess.apply_record_to_mask(record.decode_mask(cls), rec)
        for cls in CLASS_NAMES
    ])
    return preprocess.normalize(fitted), masks.astype(np.float32)


def _assemble_batch(samples, aug_rngs):
    xs, ys = [], []
    for (img, masks), rng in zip(samples, aug_rngs):
        if rng is not None:
            if rng.random() < 0.5:
                img, masks = preprocess.flip(img, masks, "horizontal")
            if rng.random() < 0.5:
                img, masks = preprocess.flip(img, masks, "vertical")
        xs.append(img[None])
        ys.append(masks)
    return np.stack(xs), np.stack(ys)


# ---------------------------------------------------------------------------
# inference paths


def predict_probs(model: unet.Model, image: np.ndarray, input_size: int,
                  patch_mode: bool = True) -> np.ndarray:
    """Per-class probabilities at the image's original dimensions.

    patch mode: pad any short axis up to the window size, slide
    size-by-size windows (final window flush to the far edge), forward
    all patches as one batch, average overlapping probabilities, and
    crop the padding away. Whole-image mode pads up to the model's
    divisor and forwards the full grid at once.
    """
    if patch_mode:
        padded, rec = preprocess.pad_to_min(image, input_size)
        norm = preprocess.normalize(padded)
        patches, layout = preprocess.make_patches(norm, input_size)
        batch = Tensor(np.stack(patches)[:, None])
        probs = sigmoid(model.forward(batch, training=False)).data
        stitched = [preprocess.stitch_patches([probs[i, c] for i in range(len(patches))],
                                              layout)
                    for c in range(len(CLASS_NAMES))]
        return np.stack([rec.restore(s) for s in stitched])
    padded, rec = preprocess.pad_to_multiple(image, model.config.divisor)
    norm = preprocess.normalize(padded)
    probs = sigmoid(model.forward(Tensor(norm[None, None]), training=False)).data[0]
    return np.stack([rec.restore(probs[c]) for c in range(len(CLASS_NAMES))])


def evaluate(model: Optional[unet.Model], records: Sequence[dataset_io.SliceRecord],
             input_size: int, patch_mode: bool = False, epoch: int = 0,
             split: str = "validation",
             predict_fn: Optional[Callable[[dataset_io.SliceRecord], np.ndarray]] = None,
             ) -> MetricReport:
    """Hard IoU per class against ground truth, averaged over slices.

    ``predict_fn`` overrides the model path (used by oracle tests); by
    default each slice goes through :func:`predict_probs`.
    """
    per_class_scores: list[list[float]] = [[] for _ in CLASS_NAMES]
    for rec in records:
        if predict_fn is not None:
            probs = predict_fn(rec)
        else:
            raw = dataset_io.load_image(rec)
            probs = predict_probs(model, raw, input_size, patch_mode=patch_mode)
        pred_masks = threshold(probs)
        for ci, cls in enumerate(CLASS_NAMES):
            per_class_scores[ci].append(iou_hard(pred_masks[ci], rec.decode_mask(cls)))
    per_class = [float(np.mean(scores)) for scores in per_class_scores]
    return MetricReport.from_per_class(per_class, epoch=epoch, split=split)


# ---------------------------------------------------------------------------
# the loop


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    lr: float
    train_loss: float
    report: MetricReport


HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "iou_large_bowel",
                   "iou_small_bowel", "iou_stomach", "mean_iou")


def write_history(history: Sequence[EpochRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row.epoch, repr(row.lr), repr(row.train_loss),
                             *[repr(v) for v in row.report.per_class_iou],
                             repr(row.report.mean_iou)])


def read_history(path) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HISTORY_COLUMNS:
            raise DatasetError(f"{path}: unexpected history columns {reader.fieldnames}")
        return [{k: float(v) for k, v in row.items()} for row in reader]


def train(model: unet.Model, records: Sequence[dataset_io.SliceRecord],
          config: TrainConfig, run_dir=None,
          progress: Optional[Callable[[EpochRow], None]] = None) -> list[EpochRow]:
    """Run the full recipe; returns the per-epoch history.

    Epoch e uses cosine_lr(e - 1), so the very first step sees lr_init
    and the schedule reaches lr_min just after the final epoch. When
    ``run_dir`` is given, history.csv, split.json, the best-validation
    checkpoint, and the final weights are written there. The model is
    left holding the final-epoch weights.
    """
    train_recs, val_recs = split_dataset(records, config.split_fraction, config.seed)
    if not train_recs or not val_recs:
        raise DatasetError("train: empty train or validation split")

    cache = {rec.id: load_training_sample(rec, config.image_size) for rec in train_recs}
    adam = Adam(model.params)
    history: list[EpochRow] = []
    best_iou = -1.0
    best_state = None

    for epoch in range(1, config.epochs + 1):
        lr = cosine_lr(epoch - 1, config)
        order = rng_for(config.seed, "shuffle", epoch).permutation(len(train_recs))
        pos = 0
        loss_sum = 0.0
        while pos < len(order):
            chunk = order[pos:pos + config.batch_size]
            samples = [cache[train_recs[i].id] for i in chunk]
            if config.augment_flips:
                aug = [rng_for(config.seed, "aug", epoch, int(i)) for i in chunk]
            else:
                aug = [None] * len(chunk)
            xb, yb = _assemble_batch(samples, aug)
            with Tape():
                logits = model.forward(Tensor(xb), training=True)
                probs = sigmoid(logits)
                loss = combined_loss(config.loss, probs, Tensor(yb))
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise TrainingDiverged(
                        f"non-finite loss {loss_value} at epoch {epoch}")
                backward(loss)
            adam.step(lr)
            adam.zero_grads()
            loss_sum += loss_value * len(chunk)
            pos += config.batch_size
        report = evaluate(model, val_recs, config.image_size, epoch=epoch)
        row = EpochRow(epoch, lr, loss_sum / len(order), report)
        history.append(row)
        if progress is not None:
            progress(row)
        if report.mean_iou > best_iou:
            best_iou = report.mean_iou
            best_state = _snapshot(model)

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_history(history, run_dir / "history.csv")
        with open(run_dir / "split.json", "w", encoding="utf-8") as fh:
            json.dump({"train_cases": sorted({r.case_id for r in train_recs}),
                       "validation_cases": sorted({r.case_id for r in val_recs})},
                      fh, indent=2)
        unet.save_weights(model, run_dir / "final.weights")
        _restore_into_copy(model, best_state, run_dir / "best.weights")
    return history


def _snapshot(model: unet.Model):
    return ({k: t.data.copy() for k, t in model.params.items()},
            {k: (s.mean.copy(), s.var.copy()) for k, s in model.bn_stats.items()})


def _restore_into_copy(model: unet.Model, state, path) -> None:
    params, bn = state
    clone = unet.build_unet(model.config)
    for k, t in clone.params.items():
        t.data = params[k].copy()
    for k, s in clone.bn_stats.items():
        s.mean[:], s.var[:] = bn[k]
    unet.save_weights(clone, path)


# ---------------------------------------------------------------------------
# experiment grid


def run_experiment_grid(encoder_styles: Sequence[str], loss_kinds: Sequence[LossKind],
                        records, unet_config: unet.UNetConfig, train_config: TrainConfig,
                        progress: Optional[Callable[[str], None]] = None):
    """Cartesian product of block styles x loss blends.

    Returns one row per style with the final-epoch validation mean IoU
    per loss kind, laid out like a results table."""
    rows = []
    for style in encoder_styles:
        row: dict[str, object] = {"encoder": style}
        for kind in loss_kinds:
            if progress is not None:
                progress(f"{style} / {kind.tag}")
            model = unet.build_unet(replace(unet_config, block_style=style))
            history = train(model, records, replace(train_config, loss=kind))
            row[kind.tag] = history[-1].report.mean_iou
        rows.append(row)
    return rows
