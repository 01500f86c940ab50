"""Dense attention fusion over a five-level feature pyramid.

Each pyramid level gets its own fusion block: all five levels are resized
to the target resolution, summed, and the sum drives two softmax-over-levels
attention branches (channel-wise and spatial-wise). The re-weighted level
maps are combined, refined with a global-context block, and added back to
the original level through a lateral skip connection.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

NUM_LEVELS = 5


@dataclass
class DamConfig:
    """Knobs for one dense attention module."""

    channels: int
    reduction: int = 4
    spatial_kernel: int = 7
    # "per_level": softmax weights multiply the resized level maps (default
    # reading). "recalibrate": sigmoid weights rescale the aggregated map.
    fusion_mode: str = "per_level"

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.spatial_kernel % 2 != 1:
            raise ValueError("spatial_kernel must be odd")
        if self.fusion_mode not in ("per_level", "recalibrate"):
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")


def check_pyramid(levels) -> None:
    """Validate a 5-level pyramid of (B, C, H, W) maps."""
    if len(levels) != NUM_LEVELS:
        raise ValueError(f"pyramid must have {NUM_LEVELS} levels, got {len(levels)}")
    c = levels[0].shape[-3]
    prev_hw = None
    for i, lvl in enumerate(levels):
        if lvl.dim() not in (3, 4):
            raise ValueError("levels must be (C, H, W) or (B, C, H, W)")
        if lvl.shape[-3] != c:
            raise ValueError("all levels must share the channel count")
        h, w = lvl.shape[-2], lvl.shape[-1]
        if h < 1 or w < 1:
            raise ValueError("levels must be at least 1x1")
        if prev_hw is not None and (h > prev_hw[0] or w > prev_hw[1]):
            raise ValueError(f"level {i} is larger than level {i - 1}")
        prev_hw = (h, w)
        if not torch.isfinite(lvl).all():
            raise ValueError(f"level {i} contains non-finite entries")


def resize_to_level(x: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
    """Resize a feature map to ``target_hw``.

    Shrinking axes use adaptive max pooling (floor/ceil window bounds),
    growing axes use nearest-neighbour replication, so any input size maps
    to any output size. Same-size input is returned unchanged.
    """
    th, tw = target_hw
    if th < 1 or tw < 1:
        raise ValueError("target size must be at least 1x1")
    if x.shape[-2:] == (th, tw):
        return x
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    h, w = x.shape[-2], x.shape[-1]
    if (h, w) != (th, tw):
        # pool the shrinking axes first, then replicate the growing ones
        if th < h or tw < w:
            x = F.adaptive_max_pool2d(x, (min(th, h), min(tw, w)))
        if th > h or tw > w:
            x = F.interpolate(x, size=(th, tw), mode="nearest")
    return x.squeeze(0) if squeeze else x


def aggregate_levels(levels, target_level: int) -> torch.Tensor:
    """Sum of all five levels after resizing each to the target level."""
    check_pyramid(levels)
    target_hw = levels[target_level].shape[-2:]
    out = resize_to_level(levels[0], target_hw)
    for lvl in levels[1:]:
        out = out + resize_to_level(lvl, target_hw)
    return out


class DependencyRefinement(nn.Module):
    """Global-context block: softmax-pooled context vector, bottleneck
    transform (projection, layer normalization, GELU, projection), broadcast
    residual. The output projection is zero-initialized so the block starts
    as the identity; the smooth nonlinearity keeps the whole block friendly
    to finite-difference probing."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.context_proj = nn.Conv2d(channels, 1, kernel_size=1)
        self.transform_in = nn.Conv2d(channels, hidden, kernel_size=1)
        self.norm = nn.LayerNorm([hidden, 1, 1])
        self.transform_out = nn.Conv2d(hidden, channels, kernel_size=1)
        nn.init.zeros_(self.transform_out.weight)
        nn.init.zeros_(self.transform_out.bias)

    def context_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax over all H*W positions; shape (B, H*W)."""
        b = x.shape[0]
        logits = self.context_proj(x).view(b, -1)
        return torch.softmax(logits, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        b, c, h, w = x.shape
        weights = self.context_weights(x)                        # (B, HW)
        context = torch.bmm(x.view(b, c, h * w), weights.unsqueeze(-1))
        context = context.view(b, c, 1, 1)
        residual = self.transform_out(F.gelu(self.norm(self.transform_in(context))))
        out = x + residual
        return out.squeeze(0) if squeeze else out


class DenseAttentionModule(nn.Module):
    """Fusion block for one target pyramid level.

    The five per-level projections of each branch live in one fused layer
    (rows/output channels indexed by level); that is arithmetically
    identical to five separate heads and much cheaper on small maps.
    """

    def __init__(self, config: DamConfig):
        super().__init__()
        self.config = config
        c = config.channels
        hidden = max(1, c // config.reduction)
        self.channel_squeeze = nn.Linear(c, hidden)
        self.channel_heads = nn.Linear(hidden, NUM_LEVELS * c)
        k = config.spatial_kernel
        self.spatial_heads = nn.Conv2d(2, NUM_LEVELS, kernel_size=k, padding=k // 2)
        self.refine = DependencyRefinement(c, config.reduction)
        # zero logits at init => uniform level weights in both branches
        nn.init.zeros_(self.channel_heads.weight)
        nn.init.zeros_(self.channel_heads.bias)
        nn.init.zeros_(self.spatial_heads.weight)
        nn.init.zeros_(self.spatial_heads.bias)

    def channel_weights(self, agg: torch.Tensor) -> torch.Tensor:
        """Per-level channel weights (B, 5, C); softmax across levels."""
        squeeze = agg.dim() == 3
        if squeeze:
            agg = agg.unsqueeze(0)
        pooled = agg.mean(dim=(-2, -1))                          # (B, C)
        trunk = F.relu(self.channel_squeeze(pooled))             # (B, hidden)
        logits = self.channel_heads(trunk).view(-1, NUM_LEVELS, agg.shape[1])
        if self.config.fusion_mode == "recalibrate":
            w = torch.sigmoid(logits)
        else:
            w = torch.softmax(logits, dim=1)
        return w.squeeze(0) if squeeze else w

    def spatial_weights(self, agg: torch.Tensor) -> torch.Tensor:
        """Per-level spatial weights (B, 5, H, W); softmax across levels."""
        squeeze = agg.dim() == 3
        if squeeze:
            agg = agg.unsqueeze(0)
        pooled = torch.cat(
            [agg.max(dim=1, keepdim=True).values, agg.mean(dim=1, keepdim=True)], dim=1)
        logits = self.spatial_heads(pooled)                      # (B, 5, H, W)
        if self.config.fusion_mode == "recalibrate":
            w = torch.sigmoid(logits)
        else:
            w = torch.softmax(logits, dim=1)
        return w.squeeze(0) if squeeze else w

    def forward(self, levels, target_level: int, _validate: bool = True) -> torch.Tensor:
        if _validate:
            check_pyramid(levels)
        squeeze = levels[0].dim() == 3
        if squeeze:
            levels = [lvl.unsqueeze(0) for lvl in levels]
        target_hw = levels[target_level].shape[-2:]
        resized = [resize_to_level(lvl, target_hw) for lvl in levels]
        agg = resized[0]
        for lvl in resized[1:]:
            agg = agg + lvl
        w_ch = self.channel_weights(agg)                         # (B, 5, C)
        w_sp = self.spatial_weights(agg)                         # (B, 5, H, W)
        if self.config.fusion_mode == "recalibrate":
            fused = (w_ch.mean(dim=1)[..., None, None] * agg
                     + w_sp.mean(dim=1, keepdim=True) * agg)
        else:
            stacked = torch.stack(resized, dim=1)                # (B, 5, C, H, W)
            weights = w_ch[..., None, None] + w_sp.unsqueeze(2)
            fused = (stacked * weights).sum(dim=1)
        out = levels[target_level] + self.refine(fused)
        return out.squeeze(0) if squeeze else out


class PyramidEnhancer(nn.Module):
    """Applies one DenseAttentionModule per pyramid level."""

    def __init__(self, config: DamConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            [DenseAttentionModule(config) for _ in range(NUM_LEVELS)])

    def forward(self, levels):
        check_pyramid(levels)
        return [block(levels, i, _validate=False)
                for i, block in enumerate(self.blocks)]
