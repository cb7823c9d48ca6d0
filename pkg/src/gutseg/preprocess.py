"""Slice geometry: border trimming, zero padding, normalization, flips,
sliding-window patching and stitched reconstruction.

All functions are pure over their inputs and safe to run in parallel
across slices. The canonical working size is 288x288; every helper takes
the target explicitly so desk-scale runs can use smaller grids.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrimPadRecord:
    """How one slice was mapped onto the working grid.

    Per axis, source pixels ``[take_start, take_start + take_len)`` were
    kept and placed at offset ``pad_before`` in the output; everything
    else was trimmed (or center-cropped) away. The record is enough to
    apply the identical transform to masks and to map predictions back
    to source coordinates.
    """

    source_height: int
    source_width: int
    take_top: int
    take_height: int
    pad_top: int
    pad_bottom: int
    take_left: int
    take_width: int
    pad_left: int
    pad_right: int

    @property
    def output_shape(self) -> tuple[int, int]:
        return (self.pad_top + self.take_height + self.pad_bottom,
                self.pad_left + self.take_width + self.pad_right)

    @property
    def is_identity(self) -> bool:
        return self.output_shape == (self.source_height, self.source_width) \
            and self.take_top == 0 and self.take_left == 0 \
            and self.pad_top == 0 and self.pad_left == 0

    def apply(self, grid: np.ndarray) -> np.ndarray:
        if grid.shape != (self.source_height, self.source_width):
            raise ShapeError(
                f"record was built for {self.source_height}x{self.source_width}, "
                f"got grid {grid.shape}")
        out = np.zeros(self.output_shape, dtype=grid.dtype)
        out[self.pad_top:self.pad_top + self.take_height,
            self.pad_left:self.pad_left + self.take_width] = \
            grid[self.take_top:self.take_top + self.take_height,
                 self.take_left:self.take_left + self.take_width]
        return out

    def restore(self, grid: np.ndarray) -> np.ndarray:
        """Map a working-grid array back to source dimensions (trimmed
        regions become zero)."""
        if grid.shape != self.output_shape:
            raise ShapeError(
                f"record produces {self.output_shape}, got grid {grid.shape}")
        out = np.zeros((self.source_height, self.source_width), dtype=grid.dtype)
        out[self.take_top:self.take_top + self.take_height,
            self.take_left:self.take_left + self.take_width] = \
            grid[self.pad_top:self.pad_top + self.take_height,
                 self.pad_left:self.pad_left + self.take_width]
        return out


def _pad_split(missing: int) -> tuple[int, int]:
    # symmetric, extra pixel at bottom/right when odd
    before = missing // 2
    return before, missing - before


def _axis_plan(line_is_zero: np.ndarray, n: int, target: int):
    """(take_start, take_len, pad_before, pad_after) for one axis."""
    if n < target:
        before, after = _pad_split(target - n)
        return 0, n, before, after
    if n == target:
        return 0, n, 0, 0
    # trim all-zero border lines, alternating edges, stopping at target
    lo, hi = 0, n
    side = 0
    while hi - lo > target:
        if side == 0 and line_is_zero[lo]:
            lo += 1
            side = 1
        elif side == 1 and line_is_zero[hi - 1]:
            hi -= 1
            side = 0
        elif line_is_zero[lo]:
            lo += 1
        elif line_is_zero[hi - 1]:
            hi -= 1
        else:
            break
    if hi - lo > target:
        # nonzero content still too large: center-crop as the fallback
        extra = (hi - lo) - target
        cut = extra // 2
        lo += cut
        hi -= extra - cut
    return lo, hi - lo, 0, 0


def trim_and_pad(image: np.ndarray, target: int = 288) -> tuple[np.ndarray, TrimPadRecord]:
    """Fit a grayscale slice onto a target x target grid.

    Per axis independently: short axes are zero-padded symmetrically
    (odd pixel at bottom/right); long axes first lose all-zero border
    lines from alternating edges, stopping at the target, and are
    center-cropped only if nonzero content still exceeds it.
    """
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeError(f"trim_and_pad: need a non-empty 2-d image, got shape {arr.shape}")
    h, w = arr.shape
    zero_rows = ~arr.any(axis=1)
    zero_cols = ~arr.any(axis=0)
    t0, th, pt, pb = _axis_plan(zero_rows, h, target)
    l0, tw, pl, pr = _axis_plan(zero_cols, w, target)
    record = TrimPadRecord(h, w, t0, th, pt, pb, l0, tw, pl, pr)
    return record.apply(arr), record


def pad_to_min(image: np.ndarray, target: int) -> tuple[np.ndarray, TrimPadRecord]:
    """Zero-pad any axis shorter than ``target``; no trimming ever."""
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeError(f"pad_to_min: need a non-empty 2-d image, got shape {arr.shape}")
    h, w = arr.shape
    pt, pb = _pad_split(max(target - h, 0))
    pl, pr = _pad_split(max(target - w, 0))
    record = TrimPadRecord(h, w, 0, h, pt, pb, 0, w, pl, pr)
    return record.apply(arr), record


def pad_to_multiple(image: np.ndarray, multiple: int) -> tuple[np.ndarray, TrimPadRecord]:
    """Zero-pad each axis up to the next multiple of ``multiple``."""
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeError(f"pad_to_multiple: need a non-empty 2-d image, got shape {arr.shape}")
    h, w = arr.shape
    th = -(-h // multiple) * multiple
    tw = -(-w // multiple) * multiple
    pt, pb = _pad_split(th - h)
    pl, pr = _pad_split(tw - w)
    record = TrimPadRecord(h, w, 0, h, pt, pb, 0, w, pl, pr)
    return record.apply(arr), record


def apply_record_to_mask(mask: np.ndarray, record: TrimPadRecord) -> np.ndarray:
    """Run a mask through the identical geometry as its image.

    Trimming is driven by zero *image* borders, so no set mask pixel
    should ever fall outside the kept window; if any do they are counted
    and reported as a warning (the transform still proceeds).
    """
    arr = np.asarray(mask, dtype=bool)
    out = record.apply(arr)
    lost = int(arr.sum()) - int(out.sum())
    if lost > 0:
        log.warning("apply_record_to_mask: %d set pixel(s) fell in trimmed regions", lost)
    return out


def normalize(image: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling to [0, 1] float32; constant images
    (degenerate range) map to all zeros."""
    arr = np.asarray(image)
    lo = arr.min()
    hi = arr.max()
    if hi == lo:
        return np.zeros(arr.shape, dtype=np.float32)
    return ((arr.astype(np.float32) - np.float32(lo))
            / np.float32(float(hi) - float(lo)))


def flip(image: np.ndarray, masks: np.ndarray, axis: str) -> tuple[np.ndarray, np.ndarray]:
    """Flip an image and its stacked per-class masks together.

    ``axis`` is ``"horizontal"`` (mirror left/right) or ``"vertical"``
    (mirror top/bottom). Involution: flipping twice restores the input.
    """
    if axis == "horizontal":
        ax = -1
    elif axis == "vertical":
        ax = -2
    else:
        raise ValueError(f"flip: axis must be 'horizontal' or 'vertical', got {axis!r}")
    return (np.ascontiguousarray(np.flip(image, axis=ax)),
            np.ascontiguousarray(np.flip(masks, axis=ax)))


@dataclass(frozen=True)
class PatchLayout:
    """Placement map tying sliding-window patches back to the source."""

    source_height: int
    source_width: int
    patch_size: int
    placements: tuple[tuple[int, int], ...]


def _axis_starts(length: int, size: int) -> list[int]:
    # stride = size, with the final window aligned flush to the far edge
    starts = list(range(0, length - size, size))
    starts.append(length - size)
    return starts


def make_patches(image: np.ndarray, size: int = 288) -> tuple[list[np.ndarray], PatchLayout]:
    """Cut a grid into size x size windows covering every pixel.

    Stride equals the window size except for the last window per axis,
    which is aligned flush to the far edge (so the final two windows may
    overlap)."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ShapeError(f"make_patches: need a 2-d grid, got shape {arr.shape}")
    h, w = arr.shape
    if h < size or w < size:
        raise ShapeError(
            f"make_patches: grid {h}x{w} smaller than patch size {size}; "
            f"run trim_and_pad (or pad_to_min) first")
    placements = tuple((r, c) for r in _axis_starts(h, size) for c in _axis_starts(w, size))
    patches = [arr[r:r + size, c:c + size].copy() for r, c in placements]
    return patches, PatchLayout(h, w, size, placements)


def stitch_patches(patch_outputs, layout: PatchLayout) -> np.ndarray:
    """Reassemble per-patch float grids; overlaps average their values.

    stitch(make_patches(x)) == x (overlap counts are powers of two, so
    the averaging is exact up to 1 ulp)."""
    if len(patch_outputs) != len(layout.placements):
        raise ShapeError(
            f"stitch_patches: {len(patch_outputs)} patches for "
            f"{len(layout.placements)} placements")
    s = layout.patch_size
    acc = np.zeros((layout.source_height, layout.source_width), dtype=np.float32)
    count = np.zeros((layout.source_height, layout.source_width), dtype=np.float32)
    for patch, (r, c) in zip(patch_outputs, layout.placements):
        patch = np.asarray(patch)
        if patch.shape != (s, s):
            raise ShapeError(f"stitch_patches: patch shape {patch.shape} != ({s}, {s})")
        acc[r:r + s, c:c + s] += patch
        count[r:r + s, c:c + s] += 1.0
    if (count == 0).any():
        raise ShapeError("stitch_patches: layout does not cover every source pixel")
    return acc / count
