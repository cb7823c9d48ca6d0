"""On-disk dataset ingestion and submission-format CSV output.

Expected tree (one 16-bit grayscale PNG per slice)::

    <root>/case{N}/case{N}_day{D}/scans/slice_{S}_{W}_{H}_{sx}_{sy}.png

Annotation and prediction CSVs share the header ``id,class,segmentation``
with ``id = case{N}_day{D}_slice_{S:04d}``, class one of the three organ
names, and segmentation an RLE string ('' for an empty mask).
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from .errors import DatasetError, RleParseError
from .losses import CLASS_NAMES
from .rle import decode_rle, validate_rle

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass
class SliceRecord:
    """One scan slice: pixels on disk, identifiers, and per-class RLE."""

    case_id: str
    day: int
    slice_index: int
    image_path: Path
    height: int
    width: int
    pixel_spacing: tuple[float, float]
    rle_per_class: dict[str, Optional[str]] = field(
        default_factory=lambda: {name: None for name in CLASS_NAMES})

    @property
    def id(self) -> str:
        return f"{self.case_id}_day{self.day}_slice_{self.slice_index:04d}"

    @property
    def sort_key(self):
        return (self.case_id, self.day, self.slice_index)

    def decode_mask(self, class_name: str) -> np.ndarray:
        rle = self.rle_per_class.get(class_name)
        if not rle:
            return np.zeros((self.height, self.width), dtype=bool)
        return decode_rle(rle, self.height, self.width)


@dataclass
class DatasetIndex:
    """Records grouped by case then day, ordered by slice index."""

    records: list[SliceRecord]

    @property
    def case_ids(self) -> list[str]:
        seen = dict.fromkeys(r.case_id for r in self.records)
        return list(seen)

    def by_case(self) -> dict[str, list[SliceRecord]]:
        out: dict[str, list[SliceRecord]] = {}
        for r in self.records:
            out.setdefault(r.case_id, []).append(r)
        return out

    def __len__(self) -> int:
        return len(self.records)


def _png_header(path: Path) -> tuple[int, int, int, int]:
    """(width, height, bit_depth, color_type) from the PNG IHDR."""
    with open(path, "rb") as fh:
        head = fh.read(26)
    if len(head) < 26 or head[:8] != _PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise DatasetError(f"{path}: not a PNG file")
    width, height = struct.unpack(">II", head[16:24])
    return width, height, head[24], head[25]


def _parse_slice_filename(path: Path):
    stem = path.name
    if not stem.endswith(".png"):
        raise DatasetError(f"{path}: expected a .png slice file")
    tokens = stem[:-4].split("_")
    if len(tokens) != 6 or tokens[0] != "slice":
        raise DatasetError(
            f"{path}: filename must look like slice_S_W_H_sx_sy.png, got {stem!r}")
    try:
        slice_index = int(tokens[1])
        width, height = int(tokens[2]), int(tokens[3])
        spacing = (float(tokens[4]), float(tokens[5]))
    except ValueError as exc:
        raise DatasetError(f"{path}: bad filename token ({exc})") from None
    if slice_index < 1:
        raise DatasetError(f"{path}: slice index must be >= 1, got {slice_index}")
    return slice_index, width, height, spacing


def _parse_case_day(dirname: str, path: Path) -> tuple[str, int]:
    if "_day" not in dirname:
        raise DatasetError(f"{path}: expected case*_day* directory, got {dirname!r}")
    case_id, day_part = dirname.split("_day", 1)
    if not case_id.startswith("case"):
        raise DatasetError(f"{path}: expected case*_day* directory, got {dirname!r}")
    try:
        day = int(day_part)
    except ValueError:
        raise DatasetError(f"{path}: bad day number in {dirname!r}") from None
    return case_id, day


def parse_slice_id(slice_id: str) -> tuple[str, int, int]:
    """'case3_day1_slice_0002' -> ('case3', 1, 2)."""
    try:
        case_part, day_part, _, idx_part = slice_id.split("_")
        if not (case_part.startswith("case") and day_part.startswith("day")):
            raise ValueError
        return case_part, int(day_part[3:]), int(idx_part)
    except ValueError:
        raise DatasetError(f"malformed slice id {slice_id!r}") from None


def _read_annotations(annotations: Path) -> dict[str, dict[str, str]]:
    by_id: dict[str, dict[str, str]] = {}
    with open(annotations, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "class", "segmentation"]:
            raise DatasetError(
                f"{annotations}: header must be id,class,segmentation, "
                f"got {reader.fieldnames}")
        for row_num, row in enumerate(reader, start=2):
            cls = row["class"]
            if cls not in CLASS_NAMES:
                raise DatasetError(
                    f"{annotations}:{row_num}: unknown class {cls!r}")
            entry = by_id.setdefault(row["id"], {})
            if cls in entry:
                raise DatasetError(
                    f"{annotations}:{row_num}: duplicate ({row['id']}, {cls})")
            entry[cls] = row["segmentation"] or ""
    return by_id


def ingest(root, annotations=None) -> DatasetIndex:
    """Walk the dataset tree, validate it, and join RLE annotations.

    Slices missing from the annotation file carry empty masks. Filename
    dimension tokens are cross-checked against the PNG header; RLE
    strings are validated against the slice extent without decoding.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist or is not a directory")
    records: dict[str, SliceRecord] = {}
    for png in root.glob("case*/case*_day*/scans/slice_*.png"):
        case_id, day = _parse_case_day(png.parent.parent.name, png)
        slice_index, width, height, spacing = _parse_slice_filename(png)
        hdr_w, hdr_h, bit_depth, color_type = _png_header(png)
        if (hdr_w, hdr_h) != (width, height):
            raise DatasetError(
                f"{png}: filename says {width}x{height} (WxH) but the PNG header "
                f"says {hdr_w}x{hdr_h}")
        if bit_depth != 16 or color_type != 0:
            raise DatasetError(
                f"{png}: need 16-bit grayscale, got bit depth {bit_depth}, "
                f"color type {color_type}")
        rec = SliceRecord(case_id, day, slice_index, png, height, width, spacing)
        if rec.id in records:
            raise DatasetError(f"duplicate slice key {rec.id} ({png})")
        records[rec.id] = rec

    if annotations is not None:
        annotations = Path(annotations)
        if not annotations.is_file():
            raise DatasetError(f"annotations file {annotations} does not exist")
        for slice_id, per_class in _read_annotations(annotations).items():
            rec = records.get(slice_id)
            if rec is None:
                raise DatasetError(
                    f"{annotations}: id {slice_id!r} has no matching slice file")
            for cls, rle in per_class.items():
                if rle:
                    try:
                        validate_rle(rle, rec.height, rec.width)
                    except RleParseError as exc:
                        raise DatasetError(
                            f"{annotations}: bad RLE for ({slice_id}, {cls}): {exc}"
                        ) from exc
                rec.rle_per_class[cls] = rle or None

    ordered = sorted(records.values(), key=lambda r: r.sort_key)
    return DatasetIndex(ordered)


def load_image(record: SliceRecord) -> np.ndarray:
    """Decode the slice to a (height, width) uint16 grid."""
    path = Path(record.image_path)
    if not path.is_file():
        raise DatasetError(f"image file {path} is missing")
    _, _, bit_depth, color_type = _png_header(path)
    if bit_depth != 16 or color_type != 0:
        raise DatasetError(
            f"{path}: need 16-bit grayscale, got bit depth {bit_depth}, "
            f"color type {color_type}")
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.shape != (record.height, record.width):
        raise DatasetError(
            f"{path}: decoded shape {arr.shape} does not match record "
            f"({record.height}, {record.width})")
    return arr.astype(np.uint16)


def write_image(path, array: np.ndarray) -> None:
    """Write a uint16 grid as a 16-bit grayscale PNG."""
    arr = np.ascontiguousarray(array, dtype=np.uint16)
    Image.fromarray(arr).save(path, format="PNG")


def write_predictions(records: Iterable[SliceRecord], masks_per_record, out_path) -> None:
    """Write a submission CSV: three rows per slice in record order.

    ``masks_per_record`` yields, per record, a (3, height, width) boolean
    stack at the slice's original dimensions.
    """
    from .rle import encode_rle

    out_path = Path(out_path)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "class", "segmentation"])
        for rec, masks in zip(records, masks_per_record):
            masks = np.asarray(masks)
            if masks.shape != (len(CLASS_NAMES), rec.height, rec.width):
                raise DatasetError(
                    f"predictions for {rec.id} have shape {masks.shape}, expected "
                    f"(3, {rec.height}, {rec.width})")
            for ci, cls in enumerate(CLASS_NAMES):
                writer.writerow([rec.id, cls, encode_rle(masks[ci])])
