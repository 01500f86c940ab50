"""Training, evaluation and ablation loops.

Single-process loops with in-memory datasets: images are decoded once,
resized to the configured square input size, and batched with a seeded
permutation per epoch, so runs are reproducible bit-for-bit for a fixed
config and seed. Logs are line-delimited JSON records.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .dataset import NUM_CATEGORIES, annotations_by_image, load_annotations
from .metrics import Instance, MetricsReport, build_report
from .pipeline import DivideAndConquerModel, infer, train_step

CATEGORIES = tuple(range(1, NUM_CATEGORIES + 1))


def set_seed(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


# ---------------------------------------------------------------------------
# in-memory dataset
# ---------------------------------------------------------------------------

@dataclass
class SplitData:
    images: np.ndarray                 # (N, S, S, 3) uint8
    boxes: list                        # per image (n, 4) float32, scaled
    categories: list                   # per image (n,) int
    areas: list                        # per image (n,) float, scaled
    labels: np.ndarray                 # (N, C) int
    tags: list = field(default_factory=list)   # split tag per image
    hidden: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    @property
    def prohibited(self) -> np.ndarray:
        return self.labels.sum(axis=1) > 0

    def subset(self, indices) -> "SplitData":
        indices = np.asarray(indices, dtype=int)
        return SplitData(
            images=self.images[indices],
            boxes=[self.boxes[i] for i in indices],
            categories=[self.categories[i] for i in indices],
            areas=[self.areas[i] for i in indices],
            labels=self.labels[indices],
            tags=[self.tags[i] for i in indices],
            hidden=[self.hidden[i] for i in indices],
        )

    def instances(self) -> list[list[Instance]]:
        out = []
        for boxes, cats, areas in zip(self.boxes, self.categories, self.areas):
            out.append([
                Instance(box=tuple(float(v) for v in b), category=int(c),
                         area=float(a))
                for b, c, a in zip(boxes, cats, areas)])
        return out


def load_split(root, split: str, input_size: int) -> SplitData:
    """Load one annotation manifest and its images at the training size."""
    root = Path(root)
    manifest = root / "annotations" / f"{split}.json"
    records, annotations = load_annotations(manifest)
    grouped = annotations_by_image(records, annotations)
    images = np.zeros((len(records), input_size, input_size, 3), dtype=np.uint8)
    boxes, cats, areas, tags, hidden = [], [], [], [], []
    labels = np.zeros((len(records), NUM_CATEGORIES), dtype=np.int64)
    for i, rec in enumerate(records):
        with Image.open(manifest.parent / rec.file_name) as img:
            img = img.convert("RGB")
            if img.size != (input_size, input_size):
                img = img.resize((input_size, input_size), Image.BILINEAR)
            images[i] = np.asarray(img, dtype=np.uint8)
        sx = input_size / rec.width
        sy = input_size / rec.height
        anns = grouped[rec.id]
        b = np.zeros((len(anns), 4), dtype=np.float32)
        c = np.zeros(len(anns), dtype=np.int64)
        a = np.zeros(len(anns), dtype=np.float64)
        for j, ann in enumerate(anns):
            x1, y1, x2, y2 = ann.box
            b[j] = (x1 * sx, y1 * sy, x2 * sx, y2 * sy)
            c[j] = ann.category_id
            a[j] = float(ann.area) * sx * sy
            labels[i, ann.category_id - 1] = 1
        boxes.append(b)
        cats.append(c)
        areas.append(a)
        tags.append(rec.split)
        hidden.append(rec.hidden)
    return SplitData(images, boxes, cats, areas, labels, tags, hidden)


def concat_splits(parts: list[SplitData]) -> SplitData:
    return SplitData(
        images=np.concatenate([p.images for p in parts]),
        boxes=[b for p in parts for b in p.boxes],
        categories=[c for p in parts for c in p.categories],
        areas=[a for p in parts for a in p.areas],
        labels=np.concatenate([p.labels for p in parts]),
        tags=[t for p in parts for t in p.tags],
        hidden=[h for p in parts for h in p.hidden],
    )


def load_test_data(root, input_size: int, split: str = "all") -> SplitData:
    if split == "all":
        names = [s for s in ("easy", "hard", "hidden", "normal")
                 if (Path(root) / "annotations" / f"{s}.json").exists()]
    else:
        names = [split]
    return concat_splits([load_split(root, s, input_size) for s in names])


def to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    x = torch.tensor(images, dtype=dtype)
    return (x / 255.0 - 0.5).permute(0, 3, 1, 2) / 0.25


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

def make_optimizer(model, cfg):
    if cfg.kind == "adamw":
        return torch.optim.AdamW(model.parameters(), lr=cfg.lr,
                                 weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=cfg.lr,
                           momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def lr_at(step: int, total_steps: int, cfg) -> float:
    """One-cycle: linear warmup over warmup_frac, cosine decay after."""
    if cfg.schedule == "constant":
        return cfg.lr
    warm = max(1, int(cfg.warmup_frac * total_steps))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    frac = (step - warm) / max(1, total_steps - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@torch.no_grad()
def predict_dataset(model, data: SplitData, batch_size: int = 32):
    """Inference over a dataset; returns (phis, detections, scores)."""
    phis, dets, scores = [], [], []
    for start in range(0, len(data), batch_size):
        images = to_tensor(data.images[start:start + batch_size])
        for res in infer(model, images):
            phis.append(res.phi)
            dets.append(res.detections)
            scores.append(res.category_scores)
    return phis, dets, scores


def evaluate_model(model, data: SplitData, batch_size: int = 32) -> MetricsReport:
    phis, dets, scores = predict_dataset(model, data, batch_size)
    if model.config.task == "detect":
        return build_report("detection", data.tags, CATEGORIES,
                            data.instances(), detections=dets)
    return build_report("multilabel", data.tags, CATEGORIES,
                        data.instances(), ml_scores=np.asarray(scores))


def multilabel_train_map(model, data: SplitData, batch_size: int = 32):
    """(mAP, gate accuracy) on a dataset; used for early stopping and the
    overfit check."""
    from .metrics import multilabel_map

    phis, _, scores = predict_dataset(model, data, batch_size)
    flags = data.prohibited
    gate_acc = float(np.mean((np.asarray(phis) > 0.5) == flags))
    try:
        m, _ = multilabel_map(np.asarray(scores), data.labels)
    except ValueError:
        m = float("nan")
    return m, gate_acc


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _detection_annotations(data: SplitData, indices) -> list:
    return [(data.boxes[i], data.categories[i]) for i in indices]


def train_model(config: ExperimentConfig, train_data: SplitData,
                val_data: SplitData | None = None, log_fn=None):
    """Train a model per config; returns (model, history list of dicts)."""
    set_seed(config.seed)
    model = DivideAndConquerModel(config.model)
    cfg = config.optim
    optimizer = make_optimizer(model, cfg)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = max(1, math.ceil(len(train_data) / cfg.batch_size))
    total_steps = steps_per_epoch * cfg.epochs
    history = []
    best_map, best_state, patience_left = -1.0, None, cfg.early_stop_patience
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train_data))
        sums = {"total": 0.0, "gate_bce": 0.0, "task": 0.0, "lambda": 0.0}
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            images = to_tensor(train_data.images[idx])
            if config.task == "detect":
                annotations = _detection_annotations(train_data, idx)
            else:
                annotations = train_data.labels[idx]
            lr = lr_at(step, total_steps, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            losses = train_step(model, images, annotations, config.loss)
            optimizer.zero_grad()
            losses["total"].backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            step += 1
            for key in ("total", "gate_bce", "task"):
                sums[key] += float(losses[key].detach())
            sums["lambda"] += float(losses["lambda"])
        record = {"epoch": epoch,
                  "lr": lr,
                  **{k: v / steps_per_epoch for k, v in sums.items()}}
        if config.task == "multilabel" and val_data is not None and len(val_data):
            val_map, gate_acc = multilabel_train_map(model, val_data)
            record["val_map"] = val_map
            record["val_gate_acc"] = gate_acc
            if cfg.early_stop_patience > 0:
                if math.isnan(val_map) or val_map > best_map + 1e-6:
                    best_map = val_map if not math.isnan(val_map) else best_map
                    best_state = {k: v.detach().clone()
                                  for k, v in model.state_dict().items()}
                    patience_left = cfg.early_stop_patience
                else:
                    patience_left -= 1
        history.append(record)
        if log_fn is not None:
            log_fn(record)
        if cfg.early_stop_patience > 0 and patience_left <= 0:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, history


def split_train_val(data: SplitData, val_fraction: float, seed: int):
    if val_fraction <= 0.0 or len(data) < 2:
        return data, None
    rng = np.random.default_rng((seed, 7))
    order = rng.permutation(len(data))
    n_val = max(1, int(round(val_fraction * len(data))))
    return data.subset(order[n_val:]), data.subset(order[:n_val])


def run_training(config: ExperimentConfig, log_stream=None):
    """Full command: load data, train, checkpoint, return artifacts."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_all = load_split(config.data.root, "train", config.data.input_size)
    train_data, val_data = split_train_val(
        train_all, config.data.val_fraction, config.seed)

    records = []

    def log_fn(record):
        records.append(record)
        line = json.dumps({"ts": round(time.time(), 3), **record}, sort_keys=True)
        if log_stream is not None:
            log_stream.write(line + "\n")
            log_stream.flush()

    model, history = train_model(config, train_data, val_data, log_fn=log_fn)
    ckpt_path = out_dir / "checkpoint.npz"
    save_checkpoint(ckpt_path, model, config.to_dict(), epoch=len(history))
    with open(out_dir / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return model, history, ckpt_path


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = ("full", "no_normals", "no_pipeline", "no_dam")


def apply_variant(config: ExperimentConfig, variant: str) -> ExperimentConfig:
    if variant not in ABLATION_VARIANTS:
        raise ValueError(
            f"unknown variant {variant!r}; expected one of {ABLATION_VARIANTS}")
    payload = config.to_dict()
    if variant == "no_pipeline":
        payload["model"]["use_gate"] = False
    elif variant == "no_dam":
        payload["model"]["use_dam"] = False
    return ExperimentConfig.from_dict(payload)


def run_ablation(config: ExperimentConfig, variants=ABLATION_VARIANTS,
                 test_data: SplitData | None = None, log_stream=None) -> dict:
    """Train each variant on the same data and seed; returns
    {variant: {"report": MetricsReport, "summary": dict}} plus deltas.

    ``no_normals`` filters item-free images from the *training* split
    only; the test set is never filtered.
    """
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    train_all = load_split(config.data.root, "train", config.data.input_size)
    if test_data is None:
        test_data = load_test_data(config.data.root, config.data.input_size)
    results = {}
    for variant in variants:
        vcfg = apply_variant(config, variant)
        data = train_all
        if variant == "no_normals":
            data = train_all.subset(np.flatnonzero(train_all.prohibited))
        train_data, val_data = split_train_val(
            data, config.data.val_fraction, config.seed)
        model, history = train_model(vcfg, train_data, val_data)
        report = evaluate_model(model, test_data)
        overall = report.splits["overall"]
        summary = {"variant": variant,
                   "error_rate": overall.get("error_rate"),
                   "fp_rate": overall.get("fp_rate")}
        if config.task == "detect":
            summary["ap"] = overall.get("ap")
        else:
            summary["multilabel_map"] = overall.get("multilabel_map")
        results[variant] = {"report": report, "summary": summary,
                            "epochs": len(history)}
        if log_stream is not None:
            log_stream.write(json.dumps({"ablation": summary}, sort_keys=True) + "\n")
            log_stream.flush()
    if "full" in results and "no_pipeline" in results:
        key = "ap" if config.task == "detect" else "multilabel_map"
        full_s, base_s = results["full"]["summary"], results["no_pipeline"]["summary"]
        results["delta_full_vs_no_pipeline"] = {
            key: (full_s.get(key) or 0.0) - (base_s.get(key) or 0.0),
            "error_rate": (full_s.get("error_rate") or 0.0)
            - (base_s.get("error_rate") or 0.0),
        }
    return results


def format_ablation_table(results: dict) -> str:
    """Side-by-side variant table, values in percent."""
    variants = [v for v in ABLATION_VARIANTS if v in results]
    keys = []
    for v in variants:
        for k, val in results[v]["summary"].items():
            if k != "variant" and k not in keys:
                keys.append(k)
    width = max(len(k) for k in keys) + 2
    lines = ["".ljust(width) + "".join(v.rjust(14) for v in variants)]
    for k in keys:
        row = k.ljust(width)
        for v in variants:
            val = results[v]["summary"].get(k)
            row += ("       -      " if val is None else f"{100.0 * val:13.1f} ")
        lines.append(row)
    delta = results.get("delta_full_vs_no_pipeline")
    if delta:
        parts = ", ".join(f"{k}: {100.0 * v:+.1f}" for k, v in delta.items())
        lines.append(f"full - no_pipeline: {parts}")
    return "\n".join(lines)
