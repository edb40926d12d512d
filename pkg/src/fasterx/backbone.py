"""CSP-style backbone emitting a four-level feature pyramid.

Levels are named by depth: P1 at stride 32 (deepest), P2 at 16, P3 at 8,
P4 at 4 (the high-resolution level used by the fourth head). Base widths
(64, 128, 256, 512, 1024) and base depths (3, 9, 9, 3) are scaled by the
profile's width / depth multipliers.
"""

from __future__ import annotations

import math

import torch.nn as nn

from fasterx.blocks import ConvBlock, CSPLayer, DSConv, Focus, SPPBottleneck

BASE_WIDTHS = (64, 128, 256, 512, 1024)
BASE_DEPTHS = (3, 9, 9, 3)

# Strides of the emitted pyramid, deepest first.
PYRAMID_STRIDES = (32, 16, 8, 4)


def scaled_width(base: int, width_mult: float) -> int:
    return int(base * width_mult)


def scaled_depth(base: int, depth_mult: float) -> int:
    return max(1, round(base * depth_mult))


class CSPDarknet(nn.Module):
    """Focus stem plus four downsampling CSP stages; SPP on the last."""

    def __init__(self, width_mult: float = 0.5, depth_mult: float = 0.33,
                 depthwise: bool = False):
        super().__init__()
        ws = [scaled_width(w, width_mult) for w in BASE_WIDTHS]
        ds = [scaled_depth(d, depth_mult) for d in BASE_DEPTHS]
        conv3 = DSConv if depthwise else ConvBlock

        self.stem = Focus(3, ws[0], ksize=3)
        self.stage2 = nn.Sequential(  # stride 4
            conv3(ws[0], ws[1], 3, 2),
            CSPLayer(ws[1], ws[1], n=ds[0], depthwise=depthwise),
        )
        self.stage3 = nn.Sequential(  # stride 8
            conv3(ws[1], ws[2], 3, 2),
            CSPLayer(ws[2], ws[2], n=ds[1], depthwise=depthwise),
        )
        self.stage4 = nn.Sequential(  # stride 16
            conv3(ws[2], ws[3], 3, 2),
            CSPLayer(ws[3], ws[3], n=ds[2], depthwise=depthwise),
        )
        self.stage5 = nn.Sequential(  # stride 32
            conv3(ws[3], ws[4], 3, 2),
            SPPBottleneck(ws[4], ws[4]),
            CSPLayer(ws[4], ws[4], n=ds[3], shortcut=False, depthwise=depthwise),
        )
        # Channels of (P1, P2, P3, P4), deepest first.
        self.out_channels = (ws[4], ws[3], ws[2], ws[1])

    def forward(self, x):
        x = self.stem(x)
        p4 = self.stage2(x)
        p3 = self.stage3(p4)
        p2 = self.stage4(p3)
        p1 = self.stage5(p2)
        return p1, p2, p3, p4
