"""Run-length codec for binary segmentation masks.

The text format is the mask-competition convention: space-separated
``start length`` pairs over the row-major flattened pixel grid with
**1-indexed** starts. The encoder always emits the canonical form:
minimal number of runs, strictly increasing, never adjacent; an empty
mask encodes to the empty string.

All functions are pure and safe for unrestricted concurrent use.
"""
from __future__ import annotations

import logging

import numpy as np

from .errors import RleParseError

log = logging.getLogger(__name__)


def _parse_pairs(rle: str):
    tokens = rle.split()
    if len(tokens) % 2:
        raise RleParseError(f"odd token count ({len(tokens)}) in RLE string")
    pairs = []
    for i in range(0, len(tokens), 2):
        try:
            start, length = int(tokens[i]), int(tokens[i + 1])
        except ValueError:
            raise RleParseError(
                f"non-numeric token in pair {i // 2}: {tokens[i]!r} {tokens[i + 1]!r}") from None
        pairs.append((start, length))
    return pairs


def validate_rle(rle: str, height: int, width: int) -> list[tuple[int, int]]:
    """Parse and validate against a height x width grid; returns pairs."""
    pairs = _parse_pairs(rle)
    total = height * width
    prev_end = 0
    for n, (start, length) in enumerate(pairs):
        if start < 1:
            raise RleParseError(f"pair {n}: start {start} < 1 (starts are 1-indexed)")
        if length < 1:
            raise RleParseError(f"pair {n}: non-positive run length {length}")
        if start <= prev_end:
            raise RleParseError(
                f"pair {n}: start {start} overlaps or precedes previous run ending at {prev_end}")
        end = start + length - 1
        if end > total:
            raise RleParseError(
                f"pair {n}: run {start}+{length} ends at {end}, beyond {height}x{width}={total}")
        prev_end = end
    return pairs


def decode_rle(rle: str, height: int, width: int) -> np.ndarray:
    """Decode to a boolean (height, width) mask; strict about malformed input."""
    pairs = validate_rle(rle, height, width)
    flat = np.zeros(height * width, dtype=bool)
    for start, length in pairs:
        flat[start - 1:start - 1 + length] = True
    return flat.reshape(height, width)


def decode_rle_lenient(rle: str, height: int, width: int) -> np.ndarray:
    """Best-effort decode: clips out-of-range runs and ORs overlaps, logging
    each repair. Prefer :func:`decode_rle`; this exists for salvaging
    third-party files."""
    pairs = _parse_pairs(rle)
    total = height * width
    flat = np.zeros(total, dtype=bool)
    for n, (start, length) in enumerate(pairs):
        if length < 1 or start > total:
            log.warning("rle: dropping unusable pair %d (%d, %d)", n, start, length)
            continue
        lo = max(start, 1)
        hi = min(start + length - 1, total)
        if lo != start or hi != start + length - 1:
            log.warning("rle: clipping pair %d (%d, %d) to [%d, %d]", n, start, length, lo, hi)
        if flat[lo - 1:hi].any():
            log.warning("rle: pair %d (%d, %d) overlaps earlier runs", n, start, length)
        flat[lo - 1:hi] = True
    return flat.reshape(height, width)


def encode_rle(mask: np.ndarray) -> str:
    """Encode a boolean mask to the canonical RLE string ('' when empty)."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    padded = np.concatenate([[False], flat, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1]) + 1
    starts, ends = edges[::2], edges[1::2]
    return " ".join(f"{s} {e - s}" for s, e in zip(starts, ends))
