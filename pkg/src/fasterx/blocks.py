"""Differentiable building blocks shared by the backbone, neck and heads.

Conventions: activation is SiLU unless disabled, batch norm uses
eps=1e-5 / momentum=0.03, and convs are initialized Kaiming-uniform
(the torch default) so runs are reproducible under a fixed seed.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

BN_EPS = 1e-5
BN_MOMENTUM = 0.03


def focus(x: torch.Tensor, r: int) -> torch.Tensor:
    """Space-to-depth: [*, C, H, W] -> [*, r^2*C, H/r, W/r].

    Channel ordering is out[c*r^2 + i*r + j, h, w] = x[c, h*r + i, w*r + j],
    the exact inverse of :func:`pixel_shuffle`.
    """
    h, w = x.shape[-2:]
    if h % r or w % r:
        raise ValueError(f"spatial size ({h}, {w}) not divisible by r={r}")
    return F.pixel_unshuffle(x, r)


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Depth-to-space: [*, r^2*C, H, W] -> [*, C, r*H, r*W]; inverse of focus."""
    c = x.shape[-3]
    if c % (r * r):
        raise ValueError(f"channel count {c} not divisible by r^2={r * r}")
    return F.pixel_shuffle(x, r)


class Focus(nn.Module):
    """Space-to-depth rearrangement followed by a fusing convolution."""

    def __init__(self, in_channels: int, out_channels: int, ksize: int = 3, r: int = 2):
        super().__init__()
        self.r = r
        self.conv = ConvBlock(in_channels * r * r, out_channels, ksize, 1)

    def forward(self, x):
        return self.conv(focus(x, self.r))


class ConvBlock(nn.Module):
    """Conv2d -> optional BatchNorm -> activation (SiLU or identity)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        ksize: int = 1,
        stride: int = 1,
        groups: int = 1,
        bias: bool = False,
        norm: bool = True,
        act: bool = True,
    ):
        super().__init__()
        pad = (ksize - 1) // 2
        self.conv = nn.Conv2d(
            in_channels, out_channels, ksize, stride, pad, groups=groups, bias=bias
        )
        self.bn = (
            nn.BatchNorm2d(out_channels, eps=BN_EPS, momentum=BN_MOMENTUM)
            if norm
            else nn.Identity()
        )
        self.act = nn.SiLU(inplace=True) if act else nn.Identity()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class DSConv(nn.Module):
    """Depthwise separable conv: depthwise k x k then pointwise 1 x 1."""

    def __init__(self, in_channels: int, out_channels: int, ksize: int = 3, stride: int = 1):
        super().__init__()
        self.dconv = ConvBlock(in_channels, in_channels, ksize, stride, groups=in_channels)
        self.pconv = ConvBlock(in_channels, out_channels, 1, 1)

    def forward(self, x):
        return self.pconv(self.dconv(x))


class GhostModule(nn.Module):
    """Cheap channel expansion: a primary 1x1 conv yields out/ratio
    intrinsic maps; a depthwise 3x3 on those yields the ghost maps;
    both are concatenated to out_channels."""

    def __init__(self, in_channels: int, out_channels: int, ratio: int = 2):
        super().__init__()
        if out_channels % ratio:
            raise ValueError(f"out_channels {out_channels} not divisible by ratio {ratio}")
        init_ch = out_channels // ratio
        cheap_ch = out_channels - init_ch
        self.primary = ConvBlock(in_channels, init_ch, 1, 1)
        self.cheap = ConvBlock(init_ch, cheap_ch, 3, 1, groups=init_ch)

    def forward(self, x):
        y = self.primary(x)
        return torch.cat([y, self.cheap(y)], dim=1)


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels < reduction:
            raise ValueError(f"channels {channels} smaller than reduction {reduction}")
        hidden = channels // reduction
        self.fc = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def forward(self, x):
        avg = self.fc(F.adaptive_avg_pool2d(x, 1))
        mx = self.fc(F.adaptive_max_pool2d(x, 1))
        return torch.sigmoid(avg + mx)


class SpatialAttention(nn.Module):
    def __init__(self, ksize: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, ksize, padding=(ksize - 1) // 2, bias=False)

    def forward(self, x):
        avg = x.mean(dim=-3, keepdim=True)
        mx = x.amax(dim=-3, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=-3)))


class CBAM(nn.Module):
    """Sequential channel-then-spatial attention gating; shape preserving."""

    def __init__(self, channels: int, reduction: int = 16, spatial_ksize: int = 7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(spatial_ksize)

    def forward(self, x):
        x = x * self.channel(x)
        return x * self.spatial(x)


class Bottleneck(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, shortcut: bool = True,
                 expansion: float = 0.5, depthwise: bool = False):
        super().__init__()
        hidden = int(out_channels * expansion)
        conv3 = DSConv if depthwise else ConvBlock
        self.conv1 = ConvBlock(in_channels, hidden, 1, 1)
        self.conv2 = conv3(hidden, out_channels, 3, 1)
        self.add = shortcut and in_channels == out_channels

    def forward(self, x):
        y = self.conv2(self.conv1(x))
        return x + y if self.add else y


class CSPLayer(nn.Module):
    """Cross-stage partial block: split, run bottlenecks on one path, merge."""

    def __init__(self, in_channels: int, out_channels: int, n: int = 1,
                 shortcut: bool = True, expansion: float = 0.5, depthwise: bool = False):
        super().__init__()
        hidden = int(out_channels * expansion)
        self.conv1 = ConvBlock(in_channels, hidden, 1, 1)
        self.conv2 = ConvBlock(in_channels, hidden, 1, 1)
        self.conv3 = ConvBlock(2 * hidden, out_channels, 1, 1)
        self.m = nn.Sequential(
            *[Bottleneck(hidden, hidden, shortcut, 1.0, depthwise) for _ in range(n)]
        )

    def forward(self, x):
        y1 = self.m(self.conv1(x))
        y2 = self.conv2(x)
        return self.conv3(torch.cat([y1, y2], dim=1))


class SPPBottleneck(nn.Module):
    """Spatial pyramid pooling over multiple kernel sizes."""

    def __init__(self, in_channels: int, out_channels: int, kernel_sizes=(5, 9, 13)):
        super().__init__()
        hidden = in_channels // 2
        self.conv1 = ConvBlock(in_channels, hidden, 1, 1)
        self.pools = nn.ModuleList(
            [nn.MaxPool2d(k, stride=1, padding=k // 2) for k in kernel_sizes]
        )
        self.conv2 = ConvBlock(hidden * (len(kernel_sizes) + 1), out_channels, 1, 1)

    def forward(self, x):
        x = self.conv1(x)
        return self.conv2(torch.cat([x] + [p(x) for p in self.pools], dim=1))
