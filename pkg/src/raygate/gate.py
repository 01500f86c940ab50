"""Coarse-grained gate: cross-attention readout of a fused feature map
followed by a binary classifier.

A learnable embedding queries every spatial position of the feature map
(keys carry a fixed 2D sinusoidal position encoding, values do not), the
multi-head results are concatenated, fused and passed through a small
feed-forward network, and a linear + sigmoid classifier turns the readout
into a confidence in (0, 1).
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .pyramid import aggregate_levels


def position_encoding(height: int, width: int, d_model: int,
                      temperature: float = 10000.0,
                      dtype: torch.dtype = torch.float32,
                      device=None) -> torch.Tensor:
    """Fixed 2D sinusoidal encoding of shape (d_model, H, W).

    Half the channels encode the row index, half the column index, each as
    interleaved sin/cos pairs over a geometric frequency ladder. Requires
    d_model divisible by 4.
    """
    if d_model % 4 != 0:
        raise ValueError(f"d_model must be divisible by 4, got {d_model}")
    num_freq = d_model // 4
    freqs = torch.arange(num_freq, dtype=dtype, device=device)
    inv = 1.0 / temperature ** (freqs / num_freq)                 # (num_freq,)
    ys = torch.arange(height, dtype=dtype, device=device)[:, None] * inv  # (H, F)
    xs = torch.arange(width, dtype=dtype, device=device)[:, None] * inv   # (W, F)
    enc = torch.zeros(d_model, height, width, dtype=dtype, device=device)
    half = d_model // 2
    enc[0:half:2] = torch.sin(ys).T[:, :, None].expand(num_freq, height, width)
    enc[1:half:2] = torch.cos(ys).T[:, :, None].expand(num_freq, height, width)
    enc[half::2] = torch.sin(xs).T[:, None, :].expand(num_freq, height, width)
    enc[half + 1::2] = torch.cos(xs).T[:, None, :].expand(num_freq, height, width)
    return enc


class CrossAttention(nn.Module):
    """Multi-head cross-attention of M learnable queries over H*W positions.

    The feature map is first brought to d_model channels by a 1x1
    projection. Keys are position-augmented features; values are the
    projected features themselves.
    """

    def __init__(self, in_channels: int, d_model: int = 256, num_heads: int = 8,
                 ffn_hidden: int = 1024):
        super().__init__()
        if d_model % num_heads != 0:
            raise ValueError("d_model must be divisible by num_heads")
        if d_model % 4 != 0:
            raise ValueError("d_model must be divisible by 4 for the position encoding")
        self.d_model = d_model
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.in_proj = nn.Conv2d(in_channels, d_model, kernel_size=1)
        self.w_q = nn.Linear(d_model, d_model)
        self.w_k = nn.Linear(d_model, d_model)
        self.w_v = nn.Linear(d_model, d_model)
        self.w_h = nn.Linear(d_model, d_model)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, ffn_hidden), nn.ReLU(), nn.Linear(ffn_hidden, d_model))

    def attention_weights(self, queries: torch.Tensor, feature: torch.Tensor) -> torch.Tensor:
        """Softmax scores per head, shape (B, N, M, H*W)."""
        return self._run(queries, feature)[1]

    def _run(self, queries, feature):
        if feature.dim() == 3:
            feature = feature.unsqueeze(0)
        b, _, h, w = feature.shape
        m = queries.shape[0]
        fp = self.in_proj(feature)                                # (B, D, H, W)
        pos = position_encoding(h, w, self.d_model, dtype=fp.dtype, device=fp.device)
        keys_in = (fp + pos).flatten(2).transpose(1, 2)           # (B, HW, D)
        vals_in = fp.flatten(2).transpose(1, 2)                   # (B, HW, D)
        n, d = self.num_heads, self.head_dim
        q = self.w_q(queries).view(m, n, d).transpose(0, 1)       # (N, M, d)
        k = self.w_k(keys_in).view(b, -1, n, d).permute(0, 2, 1, 3)   # (B, N, HW, d)
        v = self.w_v(vals_in).view(b, -1, n, d).permute(0, 2, 1, 3)   # (B, N, HW, d)
        logits = torch.einsum("nmd,bnpd->bnmp", q, k) / math.sqrt(d)
        alpha = torch.softmax(logits, dim=-1)                     # (B, N, M, HW)
        heads = torch.einsum("bnmp,bnpd->bnmd", alpha, v)
        concat = heads.permute(0, 2, 1, 3).reshape(b, m, self.d_model)
        out = self.ffn(self.w_h(concat))                          # (B, M, D)
        return out, alpha

    def forward(self, queries: torch.Tensor, feature: torch.Tensor,
                return_weights: bool = False):
        out, alpha = self._run(queries, feature)
        if return_weights:
            return out, alpha
        return out


def fuse_for_gate(levels) -> torch.Tensor:
    """Collapse a pyramid to a single map at the coarsest resolution."""
    return aggregate_levels(levels, 4)


class GateNode(nn.Module):
    """Binary presence classifier over a fused feature map."""

    def __init__(self, in_channels: int, d_model: int = 256, num_heads: int = 8,
                 ffn_hidden: int = 1024, attention: CrossAttention | None = None):
        super().__init__()
        self.attention = attention if attention is not None else CrossAttention(
            in_channels, d_model, num_heads, ffn_hidden)
        self.query = nn.Parameter(torch.randn(1, d_model) * 0.02)
        self.classifier = nn.Linear(d_model, 1)

    def logits(self, feature: torch.Tensor) -> torch.Tensor:
        """Pre-sigmoid score; shape (B,)."""
        readout = self.attention(self.query, feature)             # (B, 1, D)
        return self.classifier(readout).reshape(-1)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        """Confidence phi in (0, 1); shape (B,) for batched input, scalar
        tensor for a single (C, H, W) map."""
        squeeze = feature.dim() == 3
        phi = torch.sigmoid(self.logits(feature))
        return phi[0] if squeeze else phi


def route(phi: float, threshold: float = 0.5) -> str:
    """Strict-threshold routing: prohibited only when phi > threshold."""
    phi = float(phi)
    if not 0.0 <= phi <= 1.0:
        raise ValueError(f"phi must be in [0, 1], got {phi}")
    return "prohibited" if phi > threshold else "normal"
