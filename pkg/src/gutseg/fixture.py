"""Synthetic desk-scale dataset: geometric stand-ins for the three organ
classes, written in the real directory layout with an RLE truth CSV.

Each slice places a ring (large bowel), an ellipse (small bowel), and a
disk (stomach) on a noisy dark background; each structure gets its own
intensity band so a small network can overfit quickly. Everything is
deterministic in the seed.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .dataset import write_image
from .losses import CLASS_NAMES
from .rle import encode_rle
from .seeding import rng_for

_BACKGROUND = 1500.0
_BANDS = {"large_bowel": 18000.0, "small_bowel": 32000.0, "stomach": 48000.0}


def _grid(height: int, width: int):
    return np.meshgrid(np.arange(height), np.arange(width), indexing="ij")


def _ring(height, width, cy, cx, r_out, r_in):
    yy, xx = _grid(height, width)
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return (d2 <= r_out ** 2) & (d2 >= r_in ** 2)


def _ellipse(height, width, cy, cx, ry, rx):
    yy, xx = _grid(height, width)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _disk(height, width, cy, cx, r):
    return _ellipse(height, width, cy, cx, r, r)


def make_slice(height: int, width: int, rng) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """(uint16 image, per-class boolean masks) for one synthetic slice."""
    s = min(height, width)
    jit = 0.06 * s

    def jitter(y, x):
        return (y + rng.uniform(-jit, jit), x + rng.uniform(-jit, jit))

    cy, cx = jitter(0.30 * height, 0.32 * width)
    ring_out = rng.uniform(0.16, 0.20) * s
    masks = {
        "large_bowel": _ring(height, width, cy, cx, ring_out, 0.55 * ring_out),
        "small_bowel": _ellipse(height, width, *jitter(0.68 * height, 0.30 * width),
                                rng.uniform(0.10, 0.14) * s, rng.uniform(0.15, 0.19) * s),
        "stomach": _disk(height, width, *jitter(0.45 * height, 0.72 * width),
                         rng.uniform(0.10, 0.14) * s),
    }
    image = _BACKGROUND + rng.normal(0.0, 220.0, size=(height, width))
    for cls in CLASS_NAMES:
        band = _BANDS[cls] + rng.normal(0.0, 450.0, size=(height, width))
        image = np.where(masks[cls], band, image)
    return np.clip(image, 0.0, 65535.0).astype(np.uint16), masks


def generate(root, cases: int = 4, days: int = 1, slices: int = 2,
             height: int = 64, width: int = 64, seed: int = 0,
             spacing: tuple[float, float] = (1.5, 1.5)) -> int:
    """Write the dataset tree plus <root>/train.csv; returns slice count."""
    root = Path(root)
    rows = []
    n = 0
    for case_n in range(1, cases + 1):
        case_id = f"case{case_n}"
        for day in range(1, days + 1):
            scans = root / case_id / f"{case_id}_day{day}" / "scans"
            scans.mkdir(parents=True, exist_ok=True)
            for s in range(1, slices + 1):
                rng = rng_for(seed, "fixture", case_n, day, s)
                image, masks = make_slice(height, width, rng)
                name = (f"slice_{s:04d}_{width}_{height}_"
                        f"{spacing[0]:.2f}_{spacing[1]:.2f}.png")
                write_image(scans / name, image)
                slice_id = f"{case_id}_day{day}_slice_{s:04d}"
                for cls in CLASS_NAMES:
                    rows.append([slice_id, cls, encode_rle(masks[cls])])
                n += 1
    with open(root / "train.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "class", "segmentation"])
        writer.writerows(rows)
    return n
