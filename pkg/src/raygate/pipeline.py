"""Divide-and-conquer model: backbone -> pyramid -> dense attention ->
gate -> routed task head.

Training routes by ground truth (the task head only ever sees samples that
really contain items) and scales the task loss by the prohibited fraction
of the batch; inference routes by the gate confidence, so gated-out images
yield empty predictions by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn

from .backbone import BackboneConfig, TinyBackbone
from .detection import DenseDetectionHead
from .gate import CrossAttention, GateNode, fuse_for_gate
from .losses import LossConfig, asymmetric_loss, resolve_lambda, scaled_task_loss
from .multilabel import MultiLabelNode
from .pyramid import DamConfig, PyramidEnhancer


@dataclass
class ModelConfig:
    task: str = "detect"  # "detect" | "multilabel"
    num_classes: int = 12
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    use_dam: bool = True
    dam_reduction: int = 4
    dam_spatial_kernel: int = 7
    dam_fusion_mode: str = "per_level"
    use_gate: bool = True
    gate_threshold: float = 0.5
    detach_gate: bool = False
    share_attention: bool = False
    d_model: int = 256
    num_heads: int = 8
    ffn_hidden: int = 1024
    head_level: int = 1          # pyramid level feeding the detection head
    head_tower: int = 2
    score_floor: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if self.task not in ("detect", "multilabel"):
            raise ValueError(f"unknown task {self.task!r}")
        if not 0 <= self.head_level <= 4:
            raise ValueError("head_level must index a pyramid level (0..4)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InferenceResult:
    phi: float
    routed: bool
    detections: list = field(default_factory=list)
    category_scores: list = field(default_factory=list)


class DivideAndConquerModel(nn.Module):
    """Gated detector / multi-label classifier over the enhanced pyramid."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = TinyBackbone(config.backbone)
        c = config.backbone.out_channels
        if config.use_dam:
            self.enhancer = PyramidEnhancer(DamConfig(
                channels=c, reduction=config.dam_reduction,
                spatial_kernel=config.dam_spatial_kernel,
                fusion_mode=config.dam_fusion_mode))
        else:
            self.enhancer = None
        attention = CrossAttention(c, config.d_model, config.num_heads,
                                   config.ffn_hidden)
        if config.use_gate:
            self.gate = GateNode(c, config.d_model, config.num_heads,
                                 config.ffn_hidden, attention=attention)
        else:
            self.gate = None
        if config.task == "detect":
            stride = 4 * 2 ** config.head_level
            self.head = DenseDetectionHead(c, config.num_classes, stride=stride,
                                           tower_depth=config.head_tower)
        else:
            shared = attention if config.share_attention and config.use_gate else None
            self.head = MultiLabelNode(c, config.num_classes, config.d_model,
                                       config.num_heads, config.ffn_hidden,
                                       attention=shared)

    def pyramid(self, images: torch.Tensor) -> list[torch.Tensor]:
        levels = self.backbone(images)
        if self.enhancer is not None:
            levels = self.enhancer(levels)
        return levels

    def gate_scores(self, levels) -> torch.Tensor:
        fused = fuse_for_gate(levels)
        if self.config.detach_gate:
            fused = fused.detach()
        return self.gate(fused)

    def gate_logits(self, levels) -> torch.Tensor:
        fused = fuse_for_gate(levels)
        if self.config.detach_gate:
            fused = fused.detach()
        return self.gate.logits(fused)

    def task_forward(self, levels):
        if self.config.task == "detect":
            return self.head(levels[self.config.head_level])
        return self.head(fuse_for_gate(levels))

    def task_loss(self, task_out, annotations=None, labels=None,
                  loss_config: LossConfig | None = None):
        if self.config.task == "detect":
            return self.head.loss(task_out, annotations)
        cfg = loss_config or LossConfig()
        return asymmetric_loss(task_out, labels, cfg.gamma_pos, cfg.gamma_neg, cfg.eps)


def train_step(model: DivideAndConquerModel, images: torch.Tensor,
               annotations, loss_config: LossConfig | None = None) -> dict:
    """One forward pass worth of losses for a batch.

    ``annotations``: per-image (boxes, categories) pairs for detection;
    per-image 0/1 label vectors for multi-label. Returns the loss breakdown
    with differentiable ``total``.
    """
    cfg = loss_config or LossConfig()
    task = model.config.task
    if task == "detect":
        has_items = torch.tensor([len(a[0]) > 0 for a in annotations],
                                 device=images.device)
    else:
        labels = torch.as_tensor(
            annotations, dtype=images.dtype, device=images.device)
        has_items = labels.sum(dim=1) > 0
    levels = model.pyramid(images)
    prohibited = torch.where(has_items)[0]
    lam = resolve_lambda(cfg, len(annotations), int(has_items.sum()))

    if model.config.use_gate:
        # same BCE as losses.bce, evaluated from logits for saturation-safe
        # gradients (identical value away from the probability clamp)
        gate_logits = model.gate_logits(levels)
        gate_loss = torch.nn.functional.binary_cross_entropy_with_logits(
            gate_logits, has_items.to(images.dtype))
        if len(prohibited) > 0:
            subset = [lvl[prohibited] for lvl in levels]
            task_out = model.task_forward(subset)
            if task == "detect":
                raw_task = model.task_loss(
                    task_out, annotations=[annotations[i] for i in prohibited.tolist()])
            else:
                raw_task = model.task_loss(task_out, labels=labels[prohibited],
                                           loss_config=cfg)
            task_term = scaled_task_loss(raw_task, lam)
        else:
            raw_task = torch.zeros((), device=images.device, dtype=images.dtype)
            task_term = raw_task
        total = gate_loss + task_term
        return {"total": total, "gate_bce": gate_loss, "task": raw_task,
                "task_term": task_term, "lambda": lam}

    # ungated baseline: the task head trains on every sample, unscaled
    task_out = model.task_forward(levels)
    if task == "detect":
        raw_task = model.task_loss(task_out, annotations=annotations)
    else:
        raw_task = model.task_loss(task_out, labels=labels, loss_config=cfg)
    zero = torch.zeros((), device=images.device, dtype=images.dtype)
    return {"total": raw_task, "gate_bce": zero, "task": raw_task,
            "task_term": raw_task, "lambda": 1.0}


@torch.no_grad()
def infer(model: DivideAndConquerModel, images: torch.Tensor,
          threshold: float | None = None) -> list[InferenceResult]:
    """Routed inference for a batch of images."""
    model.eval()
    cfg = model.config
    thr = cfg.gate_threshold if threshold is None else threshold
    levels = model.pyramid(images)
    b = images.shape[0]
    if cfg.use_gate:
        phi = model.gate_scores(levels).reshape(-1)
        routed = phi > thr
    else:
        phi = torch.ones(b, device=images.device)
        routed = torch.ones(b, dtype=torch.bool, device=images.device)
    results = [InferenceResult(phi=float(phi[i]), routed=bool(routed[i]))
               for i in range(b)]
    if cfg.task == "multilabel":
        for r in results:
            r.category_scores = [0.0] * cfg.num_classes
    if not routed.any():
        return results
    idx = torch.where(routed)[0]
    subset = [lvl[idx] for lvl in levels]
    task_out = model.task_forward(subset)
    if cfg.task == "detect":
        dets = model.head.decode((task_out[0], task_out[1], task_out[2]),
                                 image_size=images.shape[-1],
                                 score_floor=cfg.score_floor,
                                 nms_iou=cfg.nms_iou,
                                 max_detections=cfg.max_detections)
        for j, i in enumerate(idx.tolist()):
            results[i].detections = dets[j]
    else:
        for j, i in enumerate(idx.tolist()):
            results[i].category_scores = [float(v) for v in task_out[j]]
    return results


def multilabel_infer(model: DivideAndConquerModel, images: torch.Tensor,
                     threshold: float | None = None) -> list[InferenceResult]:
    """Alias of ``infer`` for classification mode; gated-out images report
    all-zero category scores."""
    if model.config.task != "multilabel":
        raise ValueError("model is not in multilabel mode")
    return infer(model, images, threshold)
