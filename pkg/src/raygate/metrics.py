"""Evaluation protocol: COCO-style detection AP/AR, multi-label mAP, and
image-level error rates.

Detection protocol (shared by the brute-force reference evaluator in the
test suite; both implementations follow this paragraph, nothing else):
for every category and IoU threshold in {0.50, 0.55, ..., 0.95}, detections
are sorted by descending score (ties: input order), optionally truncated to
the top-k per image, and greedily matched to the unmatched ground truth of
the same category with the highest IoU >= threshold (ties: lowest ground
truth index). With an area range active, ground truths outside the range
are "ignored": they are matched only when no regular ground truth
qualifies, and detections matched to them are dropped from scoring, as are
unmatched detections whose own box area falls outside the range. Per-image
results are pooled, re-sorted by (score desc, image order, detection
order), and turned into a precision/recall curve. Detection AP uses
101-point interpolation; recall is the final recall of the pooled list.
Categories with no (in-range) ground truth are excluded from every mean.
Ground-truth area is the mask pixel count when a mask is present, else the
stated area, else the box area.

Multi-label AP is the exact step area of the PR curve over image-level
scores (101-point interpolation is *not* used there). Image-level binary
decisions: detection mode flags an image when any detection scores
strictly above 0.5; multi-label mode flags it when any category score
reaches 0.5.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
SMALL_AREA = 32.0 * 32.0
RECALL_POINTS = np.arange(101) / 100.0
REPORT_VERSION = "raygate-metrics/1"


@dataclass(frozen=True)
class Instance:
    """Ground-truth instance in (x1, y1, x2, y2) pixel coordinates."""

    box: tuple[float, float, float, float]
    category: int
    area: Optional[float] = None
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    category: int
    score: float
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


def box_iou(a, b) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes in continuous
    coordinates; 0 for disjoint boxes."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = ((a[2] - a[0]) * (a[3] - a[1])
             + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    return inter / union


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a & b| / |a | b| of two binary grids; raises when both are empty."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        raise ValueError("IoU of two empty masks is undefined")
    return float(np.logical_and(a, b).sum() / union)


def _pair_iou(det: Detection, gt: Instance, iou_type: str) -> float:
    if iou_type == "mask":
        if det.mask is None or gt.mask is None:
            raise ValueError("mask IoU requested but a mask is missing")
        return mask_iou(det.mask, gt.mask)
    return box_iou(det.box, gt.box)


def _gt_area(gt: Instance) -> float:
    if gt.mask is not None:
        return float(np.asarray(gt.mask).astype(bool).sum())
    if gt.area is not None:
        return float(gt.area)
    x1, y1, x2, y2 = gt.box
    return (x2 - x1) * (y2 - y1)


def _box_area(box) -> float:
    return (box[2] - box[0]) * (box[3] - box[1])


def match_detections(dets: Sequence[Detection], gts: Sequence[Instance],
                     iou_threshold: float, iou_type: str = "box") -> list[bool]:
    """Greedy matching; returns one TP flag per detection in input order.

    Detections are processed in descending score order (ties by input
    order); each takes the unmatched same-category ground truth with the
    highest IoU >= threshold, ties broken by ground-truth index.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched = [False] * len(gts)
    flags = [False] * len(dets)
    for i in order:
        det = dets[i]
        best, best_iou = -1, 0.0
        for g, gt in enumerate(gts):
            if matched[g] or gt.category != det.category:
                continue
            iou = _pair_iou(det, gt, iou_type)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = g, iou
        if best >= 0:
            matched[best] = True
            flags[i] = True
    return flags


def average_precision(flags: Sequence[bool], num_gt: int,
                      method: str = "interp101") -> float:
    """AP from TP/FP flags already in descending-score order.

    ``interp101`` samples the monotone precision envelope at 101 recall
    points (detection convention); ``step`` integrates the exact step
    curve (multi-label convention).
    """
    if num_gt <= 0:
        raise ValueError("num_gt must be positive")
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    if method == "step":
        deltas = np.diff(np.concatenate([[0.0], recall]))
        return float((deltas * precision).sum())
    if method != "interp101":
        raise ValueError(f"unknown method {method!r}")
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _match_category_image(dets: list[Detection], gts: list[Instance], thr: float,
                          area_range, max_dets, iou_type: str):
    """One image, one category: pooled-entry labels and the in-range GT count.

    Labels are 'tp' / 'fp' / 'ign' per the module protocol.
    """
    if area_range is None:
        gt_ign = np.zeros(len(gts), dtype=bool)
    else:
        areas = np.array([_gt_area(g) for g in gts], dtype=float)
        gt_ign = ~((areas >= area_range[0]) & (areas < area_range[1])) if len(gts) else np.zeros(0, dtype=bool)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    if max_dets is not None:
        order = order[:max_dets]
    iou = np.zeros((len(dets), len(gts)))
    for i in order:
        for g, gt in enumerate(gts):
            iou[i, g] = _pair_iou(dets[i], gt, iou_type)
    taken = np.zeros(len(gts), dtype=bool)
    out = []
    for i in order:
        row = iou[i].copy()
        row[taken] = -1.0
        row[row < thr] = -1.0
        regular = np.where(~gt_ign & (row >= 0))[0]
        ignored = np.where(gt_ign & (row >= 0))[0]
        if regular.size:
            g = regular[np.argmax(row[regular])]
            taken[g] = True
            out.append((dets[i].score, i, "tp"))
        elif ignored.size:
            g = ignored[np.argmax(row[ignored])]
            taken[g] = True
            out.append((dets[i].score, i, "ign"))
        elif area_range is not None and not (
                area_range[0] <= _box_area(dets[i].box) < area_range[1]):
            out.append((dets[i].score, i, "ign"))
        else:
            out.append((dets[i].score, i, "fp"))
    return out, int((~gt_ign).sum())


def _pooled_flags(detections, ground_truths, category, thr, area_range,
                  max_dets, iou_type):
    pooled = []
    num_gt = 0
    for img_idx, (dets, gts) in enumerate(zip(detections, ground_truths)):
        dets_c = [d for d in dets if d.category == category]
        gts_c = [g for g in gts if g.category == category]
        entries, n = _match_category_image(dets_c, gts_c, thr, area_range,
                                           max_dets, iou_type)
        num_gt += n
        pooled.extend((score, img_idx, det_idx, label)
                      for score, det_idx, label in entries)
    pooled.sort(key=lambda t: (-t[0], t[1], t[2]))
    flags = [label == "tp" for *_, label in pooled if label != "ign"]
    return flags, num_gt


def coco_summary(detections: Sequence[Sequence[Detection]],
                 ground_truths: Sequence[Sequence[Instance]],
                 categories: Sequence[int],
                 iou_type: str = "box") -> dict:
    """Detection metrics over parallel per-image lists.

    Returns ap / ap50 / ap75 / ap_small / ar1 / ar10 / ar100 / ar_small and
    per_category_ap. Undefined fields (no in-range ground truth anywhere)
    are None.
    """
    if len(detections) != len(ground_truths):
        raise ValueError("detections and ground_truths must be parallel per-image lists")
    small = (0.0, SMALL_AREA)

    def ap_cell(category, thr, area_range, max_dets=100):
        flags, num_gt = _pooled_flags(detections, ground_truths, category,
                                      thr, area_range, max_dets, iou_type)
        if num_gt == 0:
            return None
        return average_precision(flags, num_gt) if flags else 0.0

    def recall_cell(category, thr, area_range, max_dets):
        flags, num_gt = _pooled_flags(detections, ground_truths, category,
                                      thr, area_range, max_dets, iou_type)
        if num_gt == 0:
            return None
        return sum(flags) / num_gt

    def mean(values):
        vals = [v for v in values if v is not None]
        return float(np.mean(vals)) if vals else None

    per_category = {}
    for c in categories:
        v = mean(ap_cell(c, t, None) for t in IOU_THRESHOLDS)
        if v is not None:
            per_category[str(c)] = v
    return {
        "ap": mean(per_category.get(str(c)) for c in categories),
        "ap50": mean(ap_cell(c, 0.50, None) for c in categories),
        "ap75": mean(ap_cell(c, 0.75, None) for c in categories),
        "ap_small": mean(ap_cell(c, t, small)
                         for c in categories for t in IOU_THRESHOLDS),
        "ar1": mean(recall_cell(c, t, None, 1)
                    for c in categories for t in IOU_THRESHOLDS),
        "ar10": mean(recall_cell(c, t, None, 10)
                     for c in categories for t in IOU_THRESHOLDS),
        "ar100": mean(recall_cell(c, t, None, 100)
                      for c in categories for t in IOU_THRESHOLDS),
        "ar_small": mean(recall_cell(c, t, small, 100)
                         for c in categories for t in IOU_THRESHOLDS),
        "per_category_ap": per_category,
    }


def multilabel_map(scores: np.ndarray, labels: np.ndarray):
    """Mean step-area AP over categories with at least one positive image.

    ``scores`` and ``labels`` are (N images, C categories). Returns
    (mAP, {category_index: ap}); invariant under strictly increasing score
    transforms.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError("scores and labels must both be (N, C)")
    per_category = {}
    for c in range(scores.shape[1]):
        pos = int(labels[:, c].sum())
        if pos == 0:
            continue
        order = np.lexsort((np.arange(len(scores)), -scores[:, c]))
        hits = labels[order, c].astype(bool)
        ranks = np.arange(1, len(hits) + 1)
        precision_at_hit = np.cumsum(hits)[hits] / ranks[hits]
        per_category[c] = float(precision_at_hit.sum() / pos)
    if not per_category:
        raise ValueError("no category has a positive image")
    return float(np.mean(list(per_category.values()))), per_category


def image_flagged(prediction, mode: str) -> bool:
    """Binary prohibited/normal decision for one image.

    Detection mode: any detection with score strictly above 0.5.
    Multi-label mode: any category score at or above 0.5 (normal means
    every score is below 0.5).
    """
    if mode == "detection":
        return any(d.score > 0.5 for d in prediction)
    if mode == "multilabel":
        return bool(np.max(prediction) >= 0.5) if len(prediction) else False
    raise ValueError(f"unknown mode {mode!r}")


def image_error_rate(predictions, gt_flags: Sequence[bool], mode: str) -> float:
    """Fraction of images whose binary decision disagrees with the ground
    truth prohibited flag."""
    if len(predictions) != len(gt_flags):
        raise ValueError("predictions and gt_flags must be parallel")
    if not gt_flags:
        raise ValueError("empty image set")
    errors = sum(1 for pred, flag in zip(predictions, gt_flags)
                 if image_flagged(pred, mode) != bool(flag))
    return errors / len(gt_flags)


def fp_rate(predictions, gt_flags: Sequence[bool], mode: str) -> float:
    """Fraction of truly normal images flagged prohibited; error when the
    set contains no normal images."""
    normals = [pred for pred, flag in zip(predictions, gt_flags) if not flag]
    if not normals:
        raise ValueError("fp_rate undefined: no normal images")
    return sum(1 for pred in normals if image_flagged(pred, mode)) / len(normals)


# ---------------------------------------------------------------------------
# stratified report
# ---------------------------------------------------------------------------

DETECTION_FIELDS = ("ap", "ap50", "ap75", "ap_small", "ar1", "ar10", "ar100", "ar_small")


@dataclass
class MetricsReport:
    """AP/AR, multi-label mAP and error rates, overall and per split."""

    task: str
    splits: dict = field(default_factory=dict)
    version: str = REPORT_VERSION

    def to_dict(self) -> dict:
        return {"version": self.version, "task": self.task, "splits": self.splits}

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricsReport":
        if payload.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {payload.get('version')!r}")
        return cls(task=payload["task"], splits=payload["splits"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def format_table(self) -> str:
        """Human-readable table; values are percentages with one decimal."""
        names = [k for k in ("overall", "easy", "hard", "hidden", "normal")
                 if k in self.splits]
        fields = []
        for name in names:
            for key in self.splits[name]:
                if key not in fields and not key.startswith("per_category"):
                    fields.append(key)
        width = max(len(f) for f in fields) + 2
        lines = ["".ljust(width) + "".join(n.rjust(9) for n in names)]
        for f in fields:
            row = f.ljust(width)
            for name in names:
                v = self.splits[name].get(f)
                row += ("    -    " if v is None else f"{100.0 * v:8.1f} ")
            lines.append(row)
        return "\n".join(lines)


def _split_metrics(dets, gts, flags, categories, mode, ml_scores, ml_labels):
    out = {}
    if mode == "detection":
        out.update(coco_summary(dets, gts, categories))
        out["error_rate"] = image_error_rate(dets, flags, "detection")
        try:
            out["fp_rate"] = fp_rate(dets, flags, "detection")
        except ValueError:
            out["fp_rate"] = None
    else:
        try:
            m, per_cat = multilabel_map(np.asarray(ml_scores), np.asarray(ml_labels))
        except ValueError:
            m, per_cat = None, {}
        out["multilabel_map"] = m
        out["per_category_multilabel_ap"] = {str(k + 1): v for k, v in per_cat.items()}
        out["error_rate"] = image_error_rate(list(ml_scores), flags, "multilabel")
        try:
            out["fp_rate"] = fp_rate(list(ml_scores), flags, "multilabel")
        except ValueError:
            out["fp_rate"] = None
    return out


def build_report(task: str, splits: Sequence[str], categories: Sequence[int],
                 ground_truths: Sequence[Sequence[Instance]],
                 detections=None, ml_scores=None) -> MetricsReport:
    """Stratified report over parallel per-image sequences.

    ``splits`` carries one tag per image (easy / hard / hidden / normal).
    Detection task requires ``detections``; multilabel requires
    ``ml_scores`` as an (N, C) array.
    """
    n = len(ground_truths)
    flags = [len(g) > 0 for g in ground_truths]
    ml_labels = None
    if task == "multilabel":
        ml_labels = np.zeros((n, len(categories)), dtype=int)
        for i, gts in enumerate(ground_truths):
            for gt in gts:
                ml_labels[i, gt.category - 1] = 1
    report = MetricsReport(task=task)

    def subset(indices, name):
        g = [ground_truths[i] for i in indices]
        f = [flags[i] for i in indices]
        d = [detections[i] for i in indices] if detections is not None else None
        s = np.asarray([ml_scores[i] for i in indices]) if ml_scores is not None else None
        l = ml_labels[indices] if ml_labels is not None else None
        report.splits[name] = _split_metrics(d, g, f, categories, task, s, l)

    subset(np.arange(n), "overall")
    for name in ("easy", "hard", "hidden", "normal"):
        idx = np.array([i for i, s in enumerate(splits) if s == name], dtype=int)
        if idx.size:
            subset(idx, name)
    return report


def export_pr_curves(path, detections, ground_truths, categories,
                     iou_threshold: float = 0.5, iou_type: str = "box") -> None:
    """CSV of (category, recall, precision) points at one IoU threshold."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "recall", "precision"])
        for c in categories:
            flags, num_gt = _pooled_flags(detections, ground_truths, c,
                                          iou_threshold, None, 100, iou_type)
            if num_gt == 0 or not flags:
                continue
            tp = np.cumsum(flags)
            fp = np.cumsum(~np.asarray(flags, dtype=bool))
            for r, p in zip(tp / num_gt, tp / (tp + fp)):
                writer.writerow([c, f"{r:.6f}", f"{p:.6f}"])
