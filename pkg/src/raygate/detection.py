"""Dense single-level detection head.

Deliberately minimal task plumbing: one pyramid level, a small conv tower,
and per-cell objectness / 12-way category / box-offset predictions with
center-sampling assignment, focal objectness loss, cross-entropy category
loss and smooth-L1 box regression. Not a contribution, just a trainable
stand-in for a full detector.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .metrics import Detection, box_iou


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Indices kept by greedy non-maximum suppression (score order)."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(box_iou(boxes[i], boxes[j]) <= iou_threshold for j in keep):
            keep.append(i)
    return keep


class DenseDetectionHead(nn.Module):
    """Per-cell predictor on one feature level at a fixed stride."""

    def __init__(self, in_channels: int, num_classes: int = 12, stride: int = 8,
                 tower_depth: int = 2, center_radius: float = 1.5):
        super().__init__()
        self.num_classes = num_classes
        self.stride = stride
        self.center_radius = center_radius
        tower = []
        for _ in range(tower_depth):
            tower += [
                nn.Conv2d(in_channels, in_channels, 3, padding=1),
                nn.GroupNorm(min(8, in_channels), in_channels),
                nn.SiLU(),
            ]
        self.tower = nn.Sequential(*tower)
        self.obj_head = nn.Conv2d(in_channels, 1, 1)
        self.cls_head = nn.Conv2d(in_channels, num_classes, 1)
        self.box_head = nn.Conv2d(in_channels, 4, 1)
        # rare-positive prior keeps early objectness probabilities low
        nn.init.constant_(self.obj_head.bias, -math.log(99.0))
        nn.init.constant_(self.box_head.bias, 1.0)

    def forward(self, feature):
        x = self.tower(feature)
        return self.obj_head(x), self.cls_head(x), self.box_head(x)

    # -- target assignment ---------------------------------------------------

    def build_targets(self, grid_hw, boxes, categories, device, dtype):
        """Center-sampling assignment for one image.

        Cells whose center lies inside a box and within ``center_radius``
        strides of its center become positive; overlaps resolve to the
        smaller box. A box capturing no cell claims its nearest cell.
        Returns (obj (h, w), cls (h, w), ltrb (4, h, w), positive (h, w)).
        """
        gh, gw = grid_hw
        s = self.stride
        cy = (torch.arange(gh, device=device, dtype=dtype) + 0.5) * s
        cx = (torch.arange(gw, device=device, dtype=dtype) + 0.5) * s
        obj = torch.zeros(gh, gw, device=device, dtype=dtype)
        cls = torch.zeros(gh, gw, device=device, dtype=torch.long)
        ltrb = torch.zeros(4, gh, gw, device=device, dtype=dtype)
        pos = torch.zeros(gh, gw, device=device, dtype=torch.bool)
        order = sorted(range(len(boxes)),
                       key=lambda i: -(boxes[i][2] - boxes[i][0]) * (boxes[i][3] - boxes[i][1]))
        for i in order:  # descending area: smaller boxes overwrite
            x1, y1, x2, y2 = (float(v) for v in boxes[i])
            bx, by = (x1 + x2) / 2.0, (y1 + y2) / 2.0
            inside = ((cx[None, :] > x1) & (cx[None, :] < x2)
                      & (cy[:, None] > y1) & (cy[:, None] < y2))
            near = ((cx[None, :] - bx).abs() <= self.center_radius * s) \
                & ((cy[:, None] - by).abs() <= self.center_radius * s)
            cells = inside & near
            if not cells.any():
                j = int(torch.argmin((cx - bx).abs()))
                k = int(torch.argmin((cy - by).abs()))
                cells = torch.zeros_like(pos)
                cells[k, j] = True
            yy, xx = torch.where(cells)
            obj[yy, xx] = 1.0
            cls[yy, xx] = int(categories[i]) - 1
            t = torch.stack([cx[xx] - x1, cy[yy] - y1, x2 - cx[xx], y2 - cy[yy]])
            ltrb[:, yy, xx] = (t / s).clamp(min=0.05)
            pos[yy, xx] = True
        return obj, cls, ltrb, pos

    def loss(self, predictions, annotations):
        """Focal objectness + cross-entropy category + smooth-L1 box loss.

        ``annotations`` is a per-image list of (boxes, categories); boxes
        are (x1, y1, x2, y2) in input pixels.
        """
        obj_p, cls_p, box_p = predictions
        b, _, gh, gw = obj_p.shape
        device, dtype = obj_p.device, obj_p.dtype
        obj_t = torch.zeros(b, gh, gw, device=device, dtype=dtype)
        cls_t = torch.zeros(b, gh, gw, device=device, dtype=torch.long)
        ltrb_t = torch.zeros(b, 4, gh, gw, device=device, dtype=dtype)
        pos = torch.zeros(b, gh, gw, device=device, dtype=torch.bool)
        for i, (boxes, cats) in enumerate(annotations):
            if len(boxes) == 0:
                continue
            obj_t[i], cls_t[i], ltrb_t[i], pos[i] = self.build_targets(
                (gh, gw), boxes, cats, device, dtype)
        num_pos = max(1, int(pos.sum()))

        p = torch.sigmoid(obj_p.squeeze(1))
        pt = torch.where(obj_t > 0.5, p, 1.0 - p).clamp(1e-6, 1.0 - 1e-6)
        alpha = torch.where(obj_t > 0.5, 0.25, 0.75)
        focal = -alpha * (1.0 - pt) ** 2.0 * torch.log(pt)
        obj_loss = focal.sum() / num_pos

        if pos.any():
            cls_flat = cls_p.permute(0, 2, 3, 1)[pos]
            one_hot = F.one_hot(cls_t[pos], self.num_classes).to(dtype)
            cls_loss = F.binary_cross_entropy_with_logits(
                cls_flat, one_hot, reduction="sum") / num_pos
            offsets = F.softplus(box_p).permute(0, 2, 3, 1)[pos]
            targets = ltrb_t.permute(0, 2, 3, 1)[pos]
            box_loss = F.smooth_l1_loss(offsets, targets)
        else:
            cls_loss = obj_p.sum() * 0.0
            box_loss = obj_p.sum() * 0.0
        return obj_loss + cls_loss + box_loss

    # -- decoding -------------------------------------------------------------

    @torch.no_grad()
    def decode(self, predictions, image_size: int, score_floor: float = 0.05,
               nms_iou: float = 0.5, max_detections: int = 100):
        """Per-image detection lists from raw head outputs."""
        obj_p, cls_p, box_p = predictions
        b, _, gh, gw = obj_p.shape
        s = self.stride
        device, dtype = obj_p.device, obj_p.dtype
        cy = ((torch.arange(gh, device=device, dtype=dtype) + 0.5) * s)[None, :, None]
        cx = ((torch.arange(gw, device=device, dtype=dtype) + 0.5) * s)[None, None, :]
        offsets = F.softplus(box_p) * s
        x1 = (cx - offsets[:, 0]).clamp(0.0, image_size)
        y1 = (cy - offsets[:, 1]).clamp(0.0, image_size)
        x2 = (cx + offsets[:, 2]).clamp(0.0, image_size)
        y2 = (cy + offsets[:, 3]).clamp(0.0, image_size)
        probs = torch.sigmoid(cls_p)
        best_p, best_c = probs.max(dim=1)
        score = torch.sigmoid(obj_p.squeeze(1)) * best_p

        out = []
        for i in range(b):
            keep = score[i] >= score_floor
            boxes = torch.stack([x1[i], y1[i], x2[i], y2[i]], dim=-1)[keep].cpu().numpy()
            scores = score[i][keep].cpu().numpy()
            cats = (best_c[i][keep] + 1).cpu().numpy()
            dets = []
            for c in np.unique(cats):
                sel = np.flatnonzero(cats == c)
                kept = nms(boxes[sel], scores[sel], nms_iou)
                dets.extend(
                    Detection(box=tuple(float(v) for v in boxes[sel[k]]),
                              category=int(c), score=float(scores[sel[k]]))
                    for k in kept
                    if boxes[sel[k], 0] < boxes[sel[k], 2]
                    and boxes[sel[k], 1] < boxes[sel[k], 3])
            dets.sort(key=lambda d: -d.score)
            out.append(dets[:max_detections])
        return out
