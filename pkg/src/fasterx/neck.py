"""Feature aggregation necks.

Both necks consume the backbone pyramid ordered deepest-first:
(P1 stride 32, P2 stride 16, P3 stride 8, P4 stride 4), truncated to the
first three levels in 3-head configurations.

``PAFPN`` is the baseline: a top-down FPN followed by a bottom-up path,
preserving per-level channel counts. ``SlimFPN`` drops the bottom-up
path, maps every level to one unified channel count with ghost modules,
and keeps only the top-down semantic flow.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from fasterx.blocks import ConvBlock, CSPLayer, DSConv, GhostModule


def _upsample(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="nearest")


class PAFPN(nn.Module):
    """Top-down FPN + bottom-up aggregation over 3 or 4 pyramid levels.

    ``channels`` lists input channel counts deepest-first; outputs match
    them level for level.
    """

    def __init__(self, channels, depth: int = 1, depthwise: bool = False):
        super().__init__()
        self.channels = tuple(channels)
        n = len(self.channels)
        if n < 2:
            raise ValueError("need at least two pyramid levels")
        conv3 = DSConv if depthwise else ConvBlock

        self.lateral = nn.ModuleList()
        self.td_fuse = nn.ModuleList()
        for k in range(n - 1):
            src = self.channels[k]
            dst = self.channels[k + 1]
            self.lateral.append(ConvBlock(src, dst, 1, 1))
            self.td_fuse.append(
                CSPLayer(2 * dst, dst, n=depth, shortcut=False, depthwise=depthwise)
            )

        self.down = nn.ModuleList()
        self.bu_fuse = nn.ModuleList()
        for k in range(n - 1):
            dst = self.channels[k + 1]
            self.down.append(conv3(dst, dst, 3, 2))
            self.bu_fuse.append(
                CSPLayer(2 * dst, self.channels[k], n=depth, shortcut=False,
                         depthwise=depthwise)
            )

    def forward(self, feats):
        feats = list(feats)
        if len(feats) != len(self.channels):
            raise ValueError("pyramid level count mismatch")
        n = len(feats)

        laterals = []
        td = [feats[0]]
        for k in range(n - 1):
            lat = self.lateral[k](td[-1])
            laterals.append(lat)
            merged = torch.cat([_upsample(lat), feats[k + 1]], dim=1)
            td.append(self.td_fuse[k](merged))

        outs = [None] * n
        outs[n - 1] = td[n - 1]
        for k in range(n - 2, -1, -1):
            down = self.down[k](outs[k + 1])
            outs[k] = self.bu_fuse[k](torch.cat([down, laterals[k]], dim=1))
        return tuple(outs)


class SlimFPN(nn.Module):
    """Channel-unified top-down FPN without a bottom-up path.

    Every level is first mapped to ``unified_channels`` (defaults to the
    stride-8 level's input width) by a ghost module, then fused top-down
    with nearest upsampling and CSP blocks. All outputs carry the unified
    channel count at unchanged strides.
    """

    def __init__(self, channels, unified_channels: int | None = None,
                 depth: int = 1, depthwise: bool = False):
        super().__init__()
        self.channels = tuple(channels)
        n = len(self.channels)
        if n < 2:
            raise ValueError("need at least two pyramid levels")
        # channels are deepest-first: index 2 is the stride-8 (P3) level
        self.unified_channels = unified_channels or self.channels[min(2, n - 1)]
        u = self.unified_channels

        self.reduce = nn.ModuleList([GhostModule(c, u) for c in self.channels])
        self.td_fuse = nn.ModuleList(
            [CSPLayer(2 * u, u, n=depth, shortcut=False, depthwise=depthwise)
             for _ in range(n - 1)]
        )

    def forward(self, feats):
        feats = list(feats)
        if len(feats) != len(self.channels):
            raise ValueError("pyramid level count mismatch")
        reduced = [r(f) for r, f in zip(self.reduce, feats)]

        outs = [reduced[0]]
        for k in range(len(feats) - 1):
            merged = torch.cat([_upsample(outs[-1]), reduced[k + 1]], dim=1)
            outs.append(self.td_fuse[k](merged))
        return tuple(outs)
