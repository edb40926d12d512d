"""Box geometry: format conversion, IoU/CIoU, and grid decode/encode.

Boxes are torch tensors with a trailing dimension of 4. Two layouts are
used: ``xyxy`` corners (x1, y1, x2, y2) and ``cxcywh`` center form
(cx, cy, w, h). All functions broadcast over leading dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

EPS = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Geometry of one head level: cell (i, j) covers the stride x stride
    pixel patch whose upper-left corner is (j * stride, i * stride)."""

    stride: int
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.stride <= 0 or self.grid_h <= 0 or self.grid_w <= 0:
            raise ValueError(f"invalid grid spec {self}")

    @property
    def num_cells(self) -> int:
        return self.grid_h * self.grid_w

    def cell_centers(self, device=None, dtype=torch.float32) -> torch.Tensor:
        """Image-space centers of all cells, shape [grid_h * grid_w, 2] (x, y)."""
        ys = torch.arange(self.grid_h, device=device, dtype=dtype)
        xs = torch.arange(self.grid_w, device=device, dtype=dtype)
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        centers = torch.stack([(gx + 0.5), (gy + 0.5)], dim=-1) * self.stride
        return centers.reshape(-1, 2)


def box_cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(b: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = b.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def _validate_xyxy(b: torch.Tensor) -> None:
    if not torch.isfinite(b).all():
        raise ValueError("box coordinates must be finite")


def iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise IoU of xyxy boxes; broadcasts over leading dims.

    Degenerate pairs (union area 0) return 0.
    """
    _validate_xyxy(a)
    _validate_xyxy(b)
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[..., 2] - a[..., 0]).clamp(min=0) * (a[..., 3] - a[..., 1]).clamp(min=0)
    area_b = (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)
    union = area_a + area_b - inter
    return inter / (union + EPS)


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """IoU matrix [N, M] between two sets of xyxy boxes."""
    return iou(a[:, None, :], b[None, :, :])


def ciou_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Complete-IoU loss for xyxy boxes: 1 - IoU + d^2/c^2 + a2 * v.

    d is the center distance, c the enclosing-box diagonal, v the
    aspect-ratio consistency term (4/pi^2) * (atan(wg/hg) - atan(w/h))^2,
    and a2 = v / ((1 - IoU) + v) is the trade-off weight, treated as a
    constant during backprop. Broadcasts over leading dims.
    """
    u = iou(pred, gt)

    pcx, pcy = (pred[..., 0] + pred[..., 2]) / 2, (pred[..., 1] + pred[..., 3]) / 2
    gcx, gcy = (gt[..., 0] + gt[..., 2]) / 2, (gt[..., 1] + gt[..., 3]) / 2
    d2 = (pcx - gcx) ** 2 + (pcy - gcy) ** 2

    elt = torch.minimum(pred[..., :2], gt[..., :2])
    erb = torch.maximum(pred[..., 2:], gt[..., 2:])
    c2 = ((erb - elt) ** 2).sum(-1)

    pw = (pred[..., 2] - pred[..., 0]).clamp(min=0)
    ph = (pred[..., 3] - pred[..., 1]).clamp(min=0)
    gw = (gt[..., 2] - gt[..., 0]).clamp(min=0)
    gh = (gt[..., 3] - gt[..., 1]).clamp(min=0)
    v = (4 / math.pi**2) * (
        torch.atan(gw / (gh + EPS)) - torch.atan(pw / (ph + EPS))
    ) ** 2
    with torch.no_grad():
        a2 = v / ((1 - u) + v + EPS)

    return 1 - u + d2 / (c2 + EPS) + a2 * v


def decode(raw: torch.Tensor, grid: GridSpec) -> torch.Tensor:
    """Map raw regression outputs to image-space center-form boxes.

    ``raw`` is [grid_h, grid_w, 4] holding (dx, dy, dw, dh) per cell.
    Center = (dx + j, dy + i) * stride; size = exp(dw, dh) * stride.
    Returns [grid_h, grid_w, 4] in cxcywh. Differentiable.
    """
    if raw.shape != (grid.grid_h, grid.grid_w, 4):
        raise ValueError(
            f"raw shape {tuple(raw.shape)} does not match grid "
            f"({grid.grid_h}, {grid.grid_w}, 4)"
        )
    ys = torch.arange(grid.grid_h, device=raw.device, dtype=raw.dtype)
    xs = torch.arange(grid.grid_w, device=raw.device, dtype=raw.dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    cx = (raw[..., 0] + gx) * grid.stride
    cy = (raw[..., 1] + gy) * grid.stride
    w = torch.exp(raw[..., 2]) * grid.stride
    h = torch.exp(raw[..., 3]) * grid.stride
    return torch.stack([cx, cy, w, h], dim=-1)


def encode(boxes: torch.Tensor, grid: GridSpec) -> torch.Tensor:
    """Inverse of :func:`decode`: recover raw offsets from cxcywh boxes."""
    if boxes.shape != (grid.grid_h, grid.grid_w, 4):
        raise ValueError("boxes shape does not match grid")
    ys = torch.arange(grid.grid_h, device=boxes.device, dtype=boxes.dtype)
    xs = torch.arange(grid.grid_w, device=boxes.device, dtype=boxes.dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    dx = boxes[..., 0] / grid.stride - gx
    dy = boxes[..., 1] / grid.stride - gy
    dw = torch.log(boxes[..., 2] / grid.stride)
    dh = torch.log(boxes[..., 3] / grid.stride)
    return torch.stack([dx, dy, dw, dh], dim=-1)


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_thr: float) -> torch.Tensor:
    """Greedy IoU NMS on xyxy boxes; returns kept indices, score-descending."""
    order = torch.argsort(scores, descending=True, stable=True)
    keep = []
    suppressed = torch.zeros(len(order), dtype=torch.bool)
    for pos, idx in enumerate(order.tolist()):
        if suppressed[pos]:
            continue
        keep.append(idx)
        if pos + 1 < len(order):
            rest = order[pos + 1 :]
            ious = iou(boxes[idx].unsqueeze(0), boxes[rest])
            suppressed[pos + 1 :] |= ious > iou_thr
    return torch.tensor(keep, dtype=torch.long)
