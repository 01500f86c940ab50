"""Deterministic synthetic X-ray-like dataset generator.

Images composite translucent procedural shapes over a light background:
twelve distinguishable prohibited-item silhouettes (cool palette), benign
"household" objects (the same silhouettes with a punched-out window, so
they are confusable for a model that never saw them), and warm clutter
strokes/blobs. Hidden-mode items are rendered at reduced contrast with
distractor strokes drawn over them.

Benign objects appear densely in normal images and only rarely in
prohibited ones. That asymmetry is the desk-scale stand-in for the
real-world gap between item-free traffic and curated detection sets: a
model trained without normal images never sees the benign family and
overfires on it.

Everything derives from a per-image counter-based RNG stream
((seed, split, index)), so generation is bit-reproducible and
order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .dataset import (
    CATEGORY_NAMES,
    ImageRecord,
    InstanceAnnotation,
    encode_rle,
    mask_bbox,
    save_annotations,
)

DEFAULT_COUNTS = {"train": 64, "easy": 16, "hard": 8, "hidden": 8, "normal": 16}
SPLIT_ORDER = ("train", "easy", "hard", "hidden", "normal")

# cool palette for items and benign objects, warm palette for clutter
ITEM_COLORS = [(40, 70, 190), (30, 110, 200), (70, 50, 170), (20, 90, 160)]
CLUTTER_COLORS = [(230, 150, 60), (210, 180, 90), (150, 190, 110), (220, 120, 80)]


@dataclass
class SynthSpec:
    image_size: int = 128
    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    non_prohibited_fraction: float = 0.3
    category_decay: float = 0.8
    hidden_contrast: float = 0.6
    clutter_density: float = 6.0
    train_hidden_fraction: float = 0.15
    lookalike_range: tuple = (2, 5)
    lookalike_in_prohibited: float = 0.25
    item_scale: tuple = (0.18, 0.36)
    seed: int = 0

    def __post_init__(self):
        for split, n in self.counts.items():
            if split not in SPLIT_ORDER:
                raise ValueError(f"unknown split {split!r}")
            if n < 0:
                raise ValueError("counts must be >= 0")
        if not 0.0 <= self.non_prohibited_fraction <= 1.0:
            raise ValueError("non_prohibited_fraction must be in [0, 1]")
        if not 0.0 < self.hidden_contrast <= 1.0:
            raise ValueError("hidden_contrast must be in (0, 1]")
        if self.clutter_density < 0:
            raise ValueError("clutter_density must be >= 0")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lookalike_range"] = list(self.lookalike_range)
        d["item_scale"] = list(self.item_scale)
        return d

    @classmethod
    def from_dict(cls, payload: dict) -> "SynthSpec":
        payload = dict(payload)
        if "lookalike_range" in payload:
            payload["lookalike_range"] = tuple(payload["lookalike_range"])
        if "item_scale" in payload:
            payload["item_scale"] = tuple(payload["item_scale"])
        return cls(**payload)


# ---------------------------------------------------------------------------
# glyph rendering
# ---------------------------------------------------------------------------

def _glyph_canvas(category: int, size: int) -> Image.Image:
    """Draw the silhouette of one category on a size x size canvas."""
    img = Image.new("L", (size, size), 0)
    d = ImageDraw.Draw(img)
    s = float(size)

    def rect(x1, y1, x2, y2, fill=255):
        d.rectangle([x1 * s, y1 * s, x2 * s, y2 * s], fill=fill)

    def poly(points, fill=255):
        d.polygon([(x * s, y * s) for x, y in points], fill=fill)

    def disc(cx, cy, r, fill=255):
        d.ellipse([(cx - r) * s, (cy - r) * s, (cx + r) * s, (cy + r) * s], fill=fill)

    name = CATEGORY_NAMES[category - 1]
    if name == "gun":
        rect(0.08, 0.30, 0.92, 0.48)
        rect(0.16, 0.48, 0.38, 0.92)
        rect(0.44, 0.48, 0.56, 0.62)
    elif name == "knife":
        poly([(0.04, 0.46), (0.72, 0.30), (0.72, 0.62)])
        rect(0.72, 0.38, 0.96, 0.54)
    elif name == "wrench":
        rect(0.28, 0.42, 0.96, 0.58)
        disc(0.24, 0.50, 0.20)
        rect(0.0, 0.44, 0.24, 0.56, fill=0)
    elif name == "pliers":
        poly([(0.08, 0.30), (0.92, 0.62), (0.92, 0.74), (0.08, 0.42)])
        poly([(0.08, 0.62), (0.92, 0.30), (0.92, 0.42), (0.08, 0.74)])
        rect(0.86, 0.28, 1.0, 0.76)
    elif name == "scissors":
        poly([(0.04, 0.50), (0.70, 0.26), (0.70, 0.36)])
        poly([(0.04, 0.50), (0.70, 0.66), (0.70, 0.76)])
        disc(0.80, 0.30, 0.13)
        disc(0.80, 0.30, 0.06, fill=0)
        disc(0.80, 0.70, 0.13)
        disc(0.80, 0.70, 0.06, fill=0)
    elif name == "hammer":
        rect(0.24, 0.06, 0.76, 0.30)
        rect(0.43, 0.30, 0.57, 0.96)
    elif name == "handcuffs":
        disc(0.28, 0.50, 0.24)
        disc(0.28, 0.50, 0.13, fill=0)
        disc(0.72, 0.50, 0.24)
        disc(0.72, 0.50, 0.13, fill=0)
        rect(0.40, 0.44, 0.60, 0.56)
    elif name == "baton":
        rect(0.12, 0.43, 0.92, 0.57)
        rect(0.12, 0.38, 0.36, 0.62)
        disc(0.92, 0.50, 0.07)
    elif name == "sprayer":
        rect(0.34, 0.32, 0.66, 0.94)
        poly([(0.34, 0.32), (0.66, 0.32), (0.56, 0.14), (0.44, 0.14)])
        rect(0.45, 0.04, 0.55, 0.14)
    elif name == "powerbank":
        rect(0.12, 0.30, 0.88, 0.70)
        disc(0.12, 0.50, 0.20)
        disc(0.88, 0.50, 0.20)
        rect(0.30, 0.42, 0.70, 0.46, fill=0)
        rect(0.30, 0.56, 0.70, 0.60, fill=0)
    elif name == "lighter":
        rect(0.36, 0.40, 0.64, 0.94)
        rect(0.34, 0.30, 0.66, 0.40)
        poly([(0.50, 0.04), (0.40, 0.30), (0.60, 0.30)])
    elif name == "bullet":
        rect(0.38, 0.32, 0.62, 0.90)
        disc(0.50, 0.32, 0.12)
        rect(0.33, 0.84, 0.67, 0.94)
    else:  # pragma: no cover
        raise ValueError(f"unknown category {category}")
    return img


def render_glyph(category: int, size: int, angle: float,
                 benign: bool = False) -> np.ndarray:
    """Binary silhouette, rotated and cropped to content.

    Benign variants carry a punched-out central window, which is the only
    feature separating them from the item family.
    """
    canvas = _glyph_canvas(category, size)
    if benign:
        d = ImageDraw.Draw(canvas)
        s = float(size)
        d.rectangle([0.30 * s, 0.30 * s, 0.70 * s, 0.70 * s], fill=0)
    rotated = canvas.rotate(angle, resample=Image.NEAREST, expand=True, fillcolor=0)
    mask = np.asarray(rotated, dtype=np.uint8) > 127
    if not mask.any():
        return np.ones((2, 2), dtype=bool)
    x1, y1, x2, y2 = mask_bbox(mask)
    return mask[y1:y2, x1:x2]


# ---------------------------------------------------------------------------
# compositing
# ---------------------------------------------------------------------------

def _blend(canvas: np.ndarray, mask: np.ndarray, top: int, left: int,
           color, opacity: float) -> None:
    h, w = mask.shape
    region = canvas[top:top + h, left:left + w]
    alpha = mask.astype(np.float32)[..., None] * opacity
    region *= 1.0 - alpha
    region += alpha * np.asarray(color, dtype=np.float32)


def _draw_strokes(canvas: np.ndarray, rng, count: int, box=None) -> None:
    size = canvas.shape[0]
    overlay = Image.new("L", (size, size), 0)
    d = ImageDraw.Draw(overlay)
    for _ in range(count):
        if box is None:
            x0, y0 = rng.uniform(0, size, 2)
            x1, y1 = rng.uniform(0, size, 2)
        else:
            x0, y0 = rng.uniform(box[0], box[2]), rng.uniform(box[1], box[3])
            x1, y1 = rng.uniform(box[0], box[2]), rng.uniform(box[1], box[3])
        width = int(rng.integers(1, 4))
        d.line([x0, y0, x1, y1], fill=255, width=width)
        color = CLUTTER_COLORS[int(rng.integers(len(CLUTTER_COLORS)))]
        jitter = rng.integers(-20, 21, 3)
        color = tuple(int(np.clip(c + j, 0, 255)) for c, j in zip(color, jitter))
        stroke = np.asarray(overlay, dtype=np.uint8) > 0
        _blend(canvas, stroke, 0, 0, color, 0.35)
        d.rectangle([0, 0, size, size], fill=0)


def _draw_blobs(canvas: np.ndarray, rng, count: int) -> None:
    size = canvas.shape[0]
    for _ in range(count):
        overlay = Image.new("L", (size, size), 0)
        d = ImageDraw.Draw(overlay)
        cx, cy = rng.uniform(0.1, 0.9, 2) * size
        rx, ry = rng.uniform(0.15, 0.4, 2) * size
        d.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
        blob = np.asarray(overlay, dtype=np.uint8) > 0
        color = CLUTTER_COLORS[int(rng.integers(len(CLUTTER_COLORS)))]
        _blend(canvas, blob, 0, 0, color, 0.12)


def _place(rng, glyph_shape, image_size):
    gh, gw = glyph_shape
    top = int(rng.integers(0, max(1, image_size - gh)))
    left = int(rng.integers(0, max(1, image_size - gw)))
    return top, left


def _item_color(rng):
    base = ITEM_COLORS[int(rng.integers(len(ITEM_COLORS)))]
    jitter = rng.integers(-25, 26, 3)
    return tuple(int(np.clip(c + j, 0, 255)) for c, j in zip(base, jitter))


def _render_image(spec: SynthSpec, rng, categories: list[int], hidden: bool,
                  n_lookalikes: int):
    """Returns (uint8 HxWx3 array, list of (category, mask, box, area))."""
    size = spec.image_size
    canvas = np.full((size, size, 3), 245.0, dtype=np.float32)
    canvas += rng.normal(0.0, 3.0, canvas.shape).astype(np.float32)

    _draw_blobs(canvas, rng, int(rng.integers(1, 4)))
    _draw_strokes(canvas, rng, int(rng.poisson(spec.clutter_density)))

    for _ in range(n_lookalikes):
        cat = int(rng.integers(1, len(CATEGORY_NAMES) + 1))
        scale = rng.uniform(*spec.item_scale)
        glyph = render_glyph(cat, max(12, int(scale * size)),
                             float(rng.uniform(0, 360)), benign=True)
        top, left = _place(rng, glyph.shape, size)
        _blend(canvas, glyph, top, left, _item_color(rng), 0.85)

    instances = []
    for cat in categories:
        scale = rng.uniform(*spec.item_scale)
        glyph = render_glyph(cat, max(12, int(scale * size)),
                             float(rng.uniform(0, 360)))
        top, left = _place(rng, glyph.shape, size)
        opacity = 0.85 * (spec.hidden_contrast if hidden else 1.0)
        _blend(canvas, glyph, top, left, _item_color(rng), opacity)
        full = np.zeros((size, size), dtype=bool)
        full[top:top + glyph.shape[0], left:left + glyph.shape[1]] = glyph
        box = mask_bbox(full)
        if hidden:
            _draw_strokes(canvas, rng, int(rng.integers(2, 5)), box=box)
        instances.append((cat, full, box, int(full.sum())))

    noise = rng.normal(0.0, 2.0, canvas.shape).astype(np.float32)
    img = np.clip(canvas + noise, 0, 255).astype(np.uint8)
    return img, instances


def _draw_categories(spec: SynthSpec, rng, count: int) -> list[int]:
    weights = spec.category_decay ** np.arange(len(CATEGORY_NAMES))
    p = weights / weights.sum()
    return [int(c) + 1 for c in rng.choice(len(CATEGORY_NAMES), size=count, p=p)]


def _plan_image(spec: SynthSpec, split: str, is_normal: bool, rng):
    """Item categories, hidden flag and benign-object count for one image."""
    if split == "normal" or is_normal:
        lo, hi = spec.lookalike_range
        return [], False, int(rng.integers(lo, hi + 1))
    if split == "easy":
        cats, hidden = _draw_categories(spec, rng, 1), False
    elif split == "hard":
        cats, hidden = _draw_categories(spec, rng, int(rng.integers(2, 5))), False
    elif split == "hidden":
        cats, hidden = _draw_categories(spec, rng, int(rng.integers(1, 4))), True
    else:  # train
        n = int(rng.choice([1, 2, 3, 4], p=[0.5, 0.25, 0.15, 0.10]))
        cats = _draw_categories(spec, rng, n)
        hidden = bool(rng.random() < spec.train_hidden_fraction)
    n_benign = 1 if rng.random() < spec.lookalike_in_prohibited else 0
    return cats, hidden, n_benign


def synth_generate(spec: SynthSpec, out_dir) -> dict[str, Path]:
    """Render the dataset to ``out_dir``.

    Layout: images/<split>_<index>.png plus one annotation manifest per
    split under annotations/<split>.json. Returns the manifest paths.
    Bit-identical output for identical (spec, seed).
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    ann_dir = out_dir / "annotations"
    image_dir.mkdir(parents=True, exist_ok=True)
    ann_dir.mkdir(parents=True, exist_ok=True)

    train_count = spec.counts.get("train", 0)
    n_train_normal = int(round(train_count * spec.non_prohibited_fraction))
    assign_rng = np.random.default_rng((spec.seed, 999))
    normal_train = set(assign_rng.permutation(train_count)[:n_train_normal].tolist())

    manifests = {}
    next_image_id = 1
    next_ann_id = 1
    for split_idx, split in enumerate(SPLIT_ORDER):
        count = spec.counts.get(split, 0)
        records, annotations = [], []
        for i in range(count):
            rng = np.random.default_rng((spec.seed, split_idx, i))
            is_normal = split == "train" and i in normal_train
            cats, hidden, n_benign = _plan_image(spec, split, is_normal, rng)
            img, instances = _render_image(spec, rng, cats, hidden, n_benign)
            file_name = f"images/{split}_{i:05d}.png"
            Image.fromarray(img).save(out_dir / file_name, format="PNG")
            records.append(ImageRecord(
                id=next_image_id, file_name=f"../{file_name}",
                width=spec.image_size, height=spec.image_size,
                split=split, hidden=hidden))
            for cat, mask, box, area in instances:
                x1, y1, x2, y2 = box
                annotations.append(InstanceAnnotation(
                    id=next_ann_id, image_id=next_image_id, category_id=cat,
                    bbox=(x1, y1, x2 - x1, y2 - y1), area=area,
                    segmentation=encode_rle(mask),
                    width=spec.image_size, height=spec.image_size))
                next_ann_id += 1
            next_image_id += 1
        manifest = ann_dir / f"{split}.json"
        save_annotations(records, annotations, manifest)
        manifests[split] = manifest
    return manifests
