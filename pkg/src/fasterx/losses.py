"""Training losses: focal classification, CIoU regression, objectness BCE,
and the distillation total combining student/auxiliary losses with a
feature alignment term."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from fasterx.geometry import box_cxcywh_to_xyxy, ciou_loss

EPS = 1e-9

REG_WEIGHT = 5.0


@dataclass
class LossBundle:
    cls: torch.Tensor
    reg: torch.Tensor
    obj: torch.Tensor
    num_fg: int

    @property
    def total(self) -> torch.Tensor:
        return self.cls + REG_WEIGHT * self.reg + self.obj


def focal_loss(p: torch.Tensor, y: torch.Tensor,
               gamma: float = 2.0, alpha1: float = 0.25) -> torch.Tensor:
    """Elementwise focal loss -a_t * (1 - p_t)^gamma * log(p_t).

    ``p`` are probabilities, ``y`` binary targets; both broadcast.
    """
    p = p.clamp(EPS, 1 - EPS)
    pt = p * y + (1 - p) * (1 - y)
    at = alpha1 * y + (1 - alpha1) * (1 - y)
    return -at * (1 - pt) ** gamma * torch.log(pt)


def detection_loss(cls_logits: torch.Tensor, obj_logits: torch.Tensor,
                   boxes_cxcywh: torch.Tensor, assignment,
                   gt_boxes: torch.Tensor, gt_labels: torch.Tensor,
                   gamma: float = 2.0, alpha1: float = 0.25) -> LossBundle:
    """Per-image loss over flattened candidates.

    cls: focal loss on foreground locations vs one-hot class targets;
    reg: CIoU loss on foreground boxes; obj: BCE on all locations with
    the foreground mask as target. All terms are sums normalized by
    num_fg clamped to >= 1.
    """
    fg = assignment.fg_mask
    num_fg = max(assignment.num_fg, 1)
    norm = float(num_fg)

    obj_target = fg.to(obj_logits.dtype)
    obj = F.binary_cross_entropy_with_logits(
        obj_logits, obj_target, reduction="sum"
    ) / norm

    if assignment.num_fg == 0:
        zero = obj_logits.sum() * 0
        return LossBundle(cls=zero, reg=zero.clone(), obj=obj, num_fg=0)

    matched = assignment.matched_gt[fg]
    cls_p = torch.sigmoid(cls_logits[fg])
    onehot = torch.zeros_like(cls_p)
    onehot[torch.arange(cls_p.shape[0]), gt_labels[matched]] = 1.0
    cls = focal_loss(cls_p, onehot, gamma, alpha1).sum() / norm

    pred_xyxy = box_cxcywh_to_xyxy(boxes_cxcywh[fg])
    reg = ciou_loss(pred_xyxy, gt_boxes[matched]).sum() / norm

    return LossBundle(cls=cls, reg=reg, obj=obj, num_fg=assignment.num_fg)


def feature_alignment(f_student: torch.Tensor, f_aux: torch.Tensor) -> torch.Tensor:
    """Mean squared elementwise difference between two feature maps."""
    if f_student.shape != f_aux.shape:
        raise ValueError(
            f"feature shapes differ after projection: "
            f"{tuple(f_student.shape)} vs {tuple(f_aux.shape)}"
        )
    return ((f_student - f_aux) ** 2).mean()


def distill_total(loss_student: LossBundle, loss_aux: LossBundle,
                  f_student, f_aux, lam: float) -> torch.Tensor:
    """Student loss + auxiliary loss + lam * mean-square feature distance.

    ``f_student`` / ``f_aux`` may be single tensors or equal-length
    sequences of shape-compatible tensors (averaged alignment).
    """
    total = loss_student.total + loss_aux.total
    if lam == 0:
        return total
    if torch.is_tensor(f_student):
        f_student, f_aux = [f_student], [f_aux]
    if len(f_student) != len(f_aux):
        raise ValueError("feature list lengths differ")
    align = sum(feature_alignment(s, a) for s, a in zip(f_student, f_aux))
    return total + lam * align / len(f_student)
