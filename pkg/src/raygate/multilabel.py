"""Fine-grained multi-label node: class-specific queries over a shared
cross-attention module, one independent binary classifier per category."""

from __future__ import annotations

import torch
import torch.nn as nn

from .gate import CrossAttention


class MultiLabelNode(nn.Module):
    """C learnable queries produce C class-aware readouts; each readout is
    scored by its own linear + sigmoid head. All queries go through one
    batched attention call, which is elementwise identical to C separate
    calls."""

    def __init__(self, in_channels: int, num_classes: int, d_model: int = 256,
                 num_heads: int = 8, ffn_hidden: int = 1024,
                 attention: CrossAttention | None = None):
        super().__init__()
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = num_classes
        self.attention = attention if attention is not None else CrossAttention(
            in_channels, d_model, num_heads, ffn_hidden)
        self.queries = nn.Parameter(torch.randn(num_classes, d_model) * 0.02)
        self.classifier_weight = nn.Parameter(torch.zeros(num_classes, d_model))
        self.classifier_bias = nn.Parameter(torch.zeros(num_classes))
        nn.init.normal_(self.classifier_weight, std=0.02)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        """Per-category scores in (0, 1); shape (B, C), or (C,) for a single
        (C, H, W) map."""
        squeeze = feature.dim() == 3
        readout = self.attention(self.queries, feature)           # (B, C, D)
        logits = (readout * self.classifier_weight).sum(-1) + self.classifier_bias
        scores = torch.sigmoid(logits)
        return scores[0] if squeeze else scores
