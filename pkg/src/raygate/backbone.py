"""Small configurable convolutional backbone emitting a 5-level pyramid.

Stands in for a full-scale detection backbone at desk scale: four strided
stages tapped at strides 4/8/16/32, a pooled fifth level at stride 64, and
1x1 lateral projections bringing every level to a shared channel count.
Normalization is GroupNorm so samples in a batch never couple; gradients
of one image's loss are exactly independent of the other images' pixels.
Activations are SiLU, keeping the network smooth for gradient probing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch.nn as nn
import torch.nn.functional as F


@dataclass
class BackboneConfig:
    widths: tuple = (32, 64, 128, 256)
    blocks_per_stage: int = 1
    out_channels: int = 64

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if len(self.widths) != 4:
            raise ValueError("widths must list 4 stage widths")
        if self.blocks_per_stage < 0 or self.out_channels < 1:
            raise ValueError("invalid backbone configuration")


def _conv_gn(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(math.gcd(8, cout), cout),
        nn.SiLU(),
    )


class TinyBackbone(nn.Module):
    """Emits [F1..F5] at strides 4, 8, 16, 32 and 64 of the input."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        w = config.widths
        self.stem = _conv_gn(3, w[0], stride=2)
        self.stages = nn.ModuleList()
        cin = w[0]
        for width in w:
            blocks = [_conv_gn(cin, width, stride=2)]
            blocks += [_conv_gn(width, width) for _ in range(config.blocks_per_stage)]
            self.stages.append(nn.Sequential(*blocks))
            cin = width
        self.laterals = nn.ModuleList(
            [nn.Conv2d(width, config.out_channels, 1) for width in w]
            + [nn.Conv2d(w[-1], config.out_channels, 1)])

    def forward(self, images):
        x = self.stem(images)
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        taps.append(F.max_pool2d(taps[-1], kernel_size=2, stride=2, ceil_mode=True))
        return [lat(t) for lat, t in zip(self.laterals, taps)]
