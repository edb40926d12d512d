"""Detection heads.

``PlainHead`` is the decoupled baseline: a 1x1 stem then separate
classification and regression/objectness streams at full resolution.

``PixSFHead`` wraps the streams in a position encode-decode pair: a
space-to-depth rearrangement plus 1x1 conv encodes pixel-patch position
into channels (and halves the spatial extent the streams run at), and a
1x1 conv of depth r^2 * C followed by pixel shuffle decodes each output
back to the level's native resolution.

Heads never share parameters across levels or between streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from fasterx.blocks import CBAM, ConvBlock, DSConv, focus, pixel_shuffle
from fasterx.geometry import GridSpec

HEAD_MODES = ("plain", "ds", "pixsf", "ds+pixsf")


@dataclass
class HeadOutput:
    """Per-level raw predictions plus features exposed for distillation."""

    cls_logits: torch.Tensor  # [N, num_classes, H, W]
    reg: torch.Tensor         # [N, 4, H, W]
    obj_logits: torch.Tensor  # [N, 1, H, W]
    grid: GridSpec
    features: dict = field(default_factory=dict)


def _stream(channels: int, depthwise: bool) -> nn.Sequential:
    block = DSConv if depthwise else ConvBlock
    return nn.Sequential(block(channels, channels, 3, 1), block(channels, channels, 3, 1))


class PlainHead(nn.Module):
    """Decoupled head: 1x1 stem, two conv streams, 1x1 predictors."""

    def __init__(self, in_channels: int, hidden: int, num_classes: int,
                 depthwise: bool = False, attention: bool = False):
        super().__init__()
        self.num_classes = num_classes
        self.stem = ConvBlock(in_channels, hidden, 1, 1)
        self.attn = CBAM(hidden) if attention else None
        self.cls_stream = _stream(hidden, depthwise)
        self.reg_stream = _stream(hidden, depthwise)
        self.cls_pred = nn.Conv2d(hidden, num_classes, 1)
        self.reg_pred = nn.Conv2d(hidden, 4, 1)
        self.obj_pred = nn.Conv2d(hidden, 1, 1)

    def forward(self, x: torch.Tensor, grid: GridSpec) -> HeadOutput:
        x = self.stem(x)
        if self.attn is not None:
            x = self.attn(x)
        cls_feat = self.cls_stream(x)
        reg_feat = self.reg_stream(x)
        return HeadOutput(
            cls_logits=self.cls_pred(cls_feat),
            reg=self.reg_pred(reg_feat),
            obj_logits=self.obj_pred(reg_feat),
            grid=grid,
            features={"cls_feat": cls_feat, "reg_feat": reg_feat},
        )


class PixSFHead(nn.Module):
    """Position encode-decode head.

    Encoder: focus(r) -> 1x1 conv to ``hidden`` channels (optionally CBAM
    gated). Streams run at H/r x W/r. Decoder per output: 1x1 conv to
    r^2 * out_channels, then pixel shuffle back to H x W.
    """

    def __init__(self, in_channels: int, hidden: int, num_classes: int,
                 depthwise: bool = False, attention: bool = False, r: int = 2):
        super().__init__()
        if r < 2:
            raise ValueError("shuffle factor r must be >= 2")
        self.num_classes = num_classes
        self.r = r
        self.encoder = ConvBlock(in_channels * r * r, hidden, 1, 1)
        self.attn = CBAM(hidden) if attention else None
        self.cls_stream = _stream(hidden, depthwise)
        self.reg_stream = _stream(hidden, depthwise)
        self.cls_pred = nn.Conv2d(hidden, r * r * num_classes, 1)
        self.reg_pred = nn.Conv2d(hidden, r * r * 4, 1)
        self.obj_pred = nn.Conv2d(hidden, r * r * 1, 1)

    def forward(self, x: torch.Tensor, grid: GridSpec) -> HeadOutput:
        x = self.encoder(focus(x, self.r))
        if self.attn is not None:
            x = self.attn(x)
        cls_feat = self.cls_stream(x)
        reg_feat = self.reg_stream(x)
        return HeadOutput(
            cls_logits=pixel_shuffle(self.cls_pred(cls_feat), self.r),
            reg=pixel_shuffle(self.reg_pred(reg_feat), self.r),
            obj_logits=pixel_shuffle(self.obj_pred(reg_feat), self.r),
            grid=grid,
            features={"cls_feat": cls_feat, "reg_feat": reg_feat},
        )


def make_head(mode: str, in_channels: int, hidden: int, num_classes: int,
              attention: bool = False, r: int = 2) -> nn.Module:
    if mode not in HEAD_MODES:
        raise ValueError(f"unknown head mode {mode!r}; expected one of {HEAD_MODES}")
    depthwise = mode in ("ds", "ds+pixsf")
    if mode in ("pixsf", "ds+pixsf"):
        return PixSFHead(in_channels, hidden, num_classes, depthwise, attention, r)
    return PlainHead(in_channels, hidden, num_classes, depthwise, attention)


class MultiLevelHead(nn.Module):
    """One independent head per pyramid level, deepest (stride 32) first."""

    def __init__(self, mode: str, in_channels, strides, hidden: int,
                 num_classes: int, attention: bool = False, r: int = 2):
        super().__init__()
        if len(in_channels) != len(strides):
            raise ValueError("in_channels and strides length mismatch")
        self.strides = tuple(strides)
        self.num_classes = num_classes
        self.heads = nn.ModuleList(
            [make_head(mode, c, hidden, num_classes, attention, r) for c in in_channels]
        )

    def forward(self, feats) -> list[HeadOutput]:
        feats = list(feats)
        if len(feats) != len(self.heads):
            raise ValueError(
                f"expected {len(self.heads)} pyramid levels, got {len(feats)}"
            )
        outputs = []
        for head, stride, f in zip(self.heads, self.strides, feats):
            grid = GridSpec(stride=stride, grid_h=f.shape[-2], grid_w=f.shape[-1])
            outputs.append(head(f, grid))
        return outputs
