"""Annotation schema and dataset utilities.

The interchange format is COCO-style JSON, versioned ``pidray-compat/1``:

    {
      "info":        {"version": "pidray-compat/1"},
      "categories":  [{"id": 1..12, "name": ...}],
      "images":      [{"id", "file_name", "width", "height",
                       "split", "hidden"}],
      "annotations": [{"id", "image_id", "category_id",
                       "bbox": [x, y, w, h],
                       "area": pixels,
                       "segmentation": RLE | polygon | null}]
    }

Boxes are stored as (x, y, w, h) and converted to (x1, y1, x2, y2) on
load. Segmentations are either COCO-style uncompressed RLE
({"counts": [...], "size": [h, w]}, column-major runs starting with a
zero-run) or a list of polygons ([[x1, y1, x2, y2, ...], ...]). The
``hidden`` flag marks images whose items were deliberately concealed and
dominates the difficulty classification.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

SCHEMA_VERSION = "pidray-compat/1"

CATEGORY_NAMES = (
    "gun", "knife", "wrench", "pliers", "scissors", "hammer",
    "handcuffs", "baton", "sprayer", "powerbank", "lighter", "bullet",
)
NUM_CATEGORIES = len(CATEGORY_NAMES)
CATEGORY_IDS = {name: i + 1 for i, name in enumerate(CATEGORY_NAMES)}
SPLITS = ("train", "easy", "hard", "hidden", "normal")


class AnnotationError(ValueError):
    """Base class for schema violations."""


class SchemaError(AnnotationError):
    """File does not parse as the documented schema."""


class UnknownCategoryError(AnnotationError):
    pass


class BoxOutOfBoundsError(AnnotationError):
    pass


class DuplicateImageIdError(AnnotationError):
    pass


class MaskBoxMismatchError(AnnotationError):
    pass


class MissingImageFileError(AnnotationError):
    pass


@dataclass
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int
    split: str = "train"
    hidden: bool = False


@dataclass
class InstanceAnnotation:
    id: int
    image_id: int
    category_id: int
    bbox: tuple  # (x, y, w, h) as stored
    area: float
    segmentation: Optional[object] = None
    width: int = field(default=0, repr=False)   # owning image size, for mask decode
    height: int = field(default=0, repr=False)

    @property
    def box(self) -> tuple[float, float, float, float]:
        x, y, w, h = self.bbox
        return (float(x), float(y), float(x + w), float(y + h))

    def mask(self) -> Optional[np.ndarray]:
        if self.segmentation is None:
            return None
        return decode_segmentation(self.segmentation, self.height, self.width)


# ---------------------------------------------------------------------------
# segmentation codecs
# ---------------------------------------------------------------------------

def encode_rle(mask: np.ndarray) -> dict:
    """COCO-style uncompressed RLE: column-major runs, zeros first."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    flat = mask.reshape(-1, order="F").astype(np.int8)
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    runs = np.diff(np.concatenate([[0], boundaries, [flat.size]]))
    counts = runs.tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return {"counts": counts, "size": [int(h), int(w)]}


def decode_rle(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = rle["counts"]
    if sum(counts) != h * w:
        raise SchemaError(f"RLE counts sum to {sum(counts)}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return flat.reshape((h, w), order="F")


def polygons_to_mask(polygons: Sequence[Sequence[float]], height: int, width: int) -> np.ndarray:
    canvas = Image.new("1", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    for ring in polygons:
        if len(ring) < 6 or len(ring) % 2 != 0:
            raise SchemaError(f"polygon ring needs >= 3 (x, y) pairs, got {len(ring)} values")
        draw.polygon([(ring[i], ring[i + 1]) for i in range(0, len(ring), 2)], fill=1)
    return np.asarray(canvas, dtype=bool)


def decode_segmentation(segmentation, height: int, width: int) -> np.ndarray:
    if isinstance(segmentation, dict):
        return decode_rle(segmentation)
    return polygons_to_mask(segmentation, height, width)


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight (x1, y1, x2, y2) pixel box of a non-empty binary mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask has no bounding box")
    return (int(cols[0]), int(rows[0]), int(cols[-1] + 1), int(rows[-1] + 1))


# ---------------------------------------------------------------------------
# load / save / validate
# ---------------------------------------------------------------------------

def _require(payload: dict, key: str, where: str):
    if key not in payload:
        raise SchemaError(f"{where} is missing required field {key!r}")
    return payload[key]


def load_annotations(path, require_images: bool = True):
    """Parse and validate one annotation file.

    Returns (records, annotations). Violations raise the dedicated error
    subclass naming the offending record. Image files are resolved
    relative to the annotation file's parent directory and must exist
    unless ``require_images`` is off.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path} is not valid JSON: {exc}") from exc
    version = payload.get("info", {}).get("version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported annotation version {version!r}")
    cats = {c["id"]: c["name"] for c in _require(payload, "categories", str(path))}
    if cats != {i + 1: n for i, n in enumerate(CATEGORY_NAMES)}:
        raise SchemaError("category table does not match the fixed 12-category mapping")

    records = []
    seen = set()
    by_id = {}
    for entry in _require(payload, "images", str(path)):
        rec = ImageRecord(
            id=int(_require(entry, "id", "image record")),
            file_name=str(_require(entry, "file_name", "image record")),
            width=int(_require(entry, "width", "image record")),
            height=int(_require(entry, "height", "image record")),
            split=str(entry.get("split", "train")),
            hidden=bool(entry.get("hidden", False)),
        )
        if rec.width <= 0 or rec.height <= 0:
            raise SchemaError(f"image {rec.id} has non-positive size")
        if rec.split not in SPLITS:
            raise SchemaError(f"image {rec.id} has unknown split {rec.split!r}")
        if rec.id in seen:
            raise DuplicateImageIdError(f"duplicate image id {rec.id}")
        seen.add(rec.id)
        if require_images and not (path.parent / rec.file_name).exists():
            raise MissingImageFileError(
                f"image {rec.id}: file {rec.file_name!r} not found next to {path}")
        records.append(rec)
        by_id[rec.id] = rec

    annotations = []
    for entry in _require(payload, "annotations", str(path)):
        ann_id = int(_require(entry, "id", "annotation"))
        image_id = int(_require(entry, "image_id", f"annotation {ann_id}"))
        if image_id not in by_id:
            raise SchemaError(f"annotation {ann_id} references unknown image {image_id}")
        rec = by_id[image_id]
        category_id = int(_require(entry, "category_id", f"annotation {ann_id}"))
        if category_id not in cats:
            raise UnknownCategoryError(
                f"annotation {ann_id}: unknown category id {category_id}")
        bbox = tuple(_require(entry, "bbox", f"annotation {ann_id}"))
        if len(bbox) != 4:
            raise SchemaError(f"annotation {ann_id}: bbox must have 4 entries")
        x, y, w, h = bbox
        if w <= 0 or h <= 0:
            raise BoxOutOfBoundsError(f"annotation {ann_id}: non-positive box size")
        if x < 0 or y < 0 or x + w > rec.width or y + h > rec.height:
            raise BoxOutOfBoundsError(
                f"annotation {ann_id}: box {bbox} exceeds image {image_id} "
                f"bounds {rec.width}x{rec.height}")
        ann = InstanceAnnotation(
            id=ann_id, image_id=image_id, category_id=category_id, bbox=bbox,
            area=entry.get("area", w * h), segmentation=entry.get("segmentation"),
            width=rec.width, height=rec.height)
        if ann.segmentation is not None:
            mask = ann.mask()
            if not mask.any():
                raise MaskBoxMismatchError(f"annotation {ann_id}: empty mask")
            mx1, my1, mx2, my2 = mask_bbox(mask)
            if (mx1 < x - 1 or my1 < y - 1 or mx2 > x + w + 1 or my2 > y + h + 1):
                raise MaskBoxMismatchError(
                    f"annotation {ann_id}: mask bounds ({mx1},{my1},{mx2},{my2}) "
                    f"outside box {bbox} dilated by 1px")
        annotations.append(ann)
    return records, annotations


def save_annotations(records: Sequence[ImageRecord],
                     annotations: Sequence[InstanceAnnotation], path) -> None:
    """Canonical serialization; identical inputs yield identical bytes."""
    payload = {
        "info": {"version": SCHEMA_VERSION},
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(CATEGORY_NAMES)],
        "images": [
            {"id": r.id, "file_name": r.file_name, "width": r.width,
             "height": r.height, "split": r.split, "hidden": r.hidden}
            for r in records
        ],
        "annotations": [
            {"id": a.id, "image_id": a.image_id, "category_id": a.category_id,
             "bbox": list(a.bbox), "area": a.area, "segmentation": a.segmentation}
            for a in annotations
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def annotations_by_image(records, annotations) -> dict[int, list[InstanceAnnotation]]:
    grouped = {r.id: [] for r in records}
    for ann in annotations:
        grouped[ann.image_id].append(ann)
    return grouped


def classify_difficulty(record: ImageRecord,
                        annotations: Sequence[InstanceAnnotation]) -> str:
    """hidden flag dominates; else easy (1 item), hard (2+), normal (0)."""
    if record.hidden:
        return "hidden"
    n = len(annotations)
    if n == 0:
        return "normal"
    return "easy" if n == 1 else "hard"


def dataset_stats(records, annotations) -> dict:
    per_category = {name: 0 for name in CATEGORY_NAMES}
    for ann in annotations:
        per_category[CATEGORY_NAMES[ann.category_id - 1]] += 1
    per_split = {}
    for rec in records:
        per_split[rec.split] = per_split.get(rec.split, 0) + 1
    return {
        "total_images": len(records),
        "total_instances": len(annotations),
        "per_category": per_category,
        "per_split": per_split,
    }
