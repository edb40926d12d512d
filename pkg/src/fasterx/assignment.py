"""SimOTA dynamic label assignment.

The pipeline per image: a center prior admits candidate locations per
ground-truth box, a cost matrix combines classification cost (focal, on
the joint cls * obj probability) with a CIoU regression cost, each GT
takes its dynamic-k lowest-cost candidates (k = clamped floor of the sum
of its top IoUs), and candidates claimed by several GTs keep only their
cheapest GT. Everything runs detached from autodiff.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch

from fasterx.geometry import box_cxcywh_to_xyxy, ciou_loss, pairwise_iou

EPS = 1e-9


@dataclass
class SimOTAConfig:
    radius: float = 2.5          # center prior radius, in strides
    q: int = 10                  # top IoUs summed for dynamic-k
    alpha: float = 3.0           # regression cost weight
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    cost_mode: str = "focal_ciou"  # or "bce_iou" (legacy)


@dataclass
class CandidateSet:
    """Flattened head predictions: one row per grid location."""

    centers: torch.Tensor        # [N, 2] image-space (x, y)
    strides: torch.Tensor        # [N]
    boxes_cxcywh: torch.Tensor   # [N, 4] decoded boxes
    cls_probs: torch.Tensor      # [N, num_classes]
    obj_probs: torch.Tensor      # [N]

    def __post_init__(self):
        n = self.centers.shape[0]
        for t in (self.strides, self.boxes_cxcywh, self.cls_probs, self.obj_probs):
            if t.shape[0] != n:
                raise ValueError("candidate field lengths disagree")

    def __len__(self) -> int:
        return self.centers.shape[0]


@dataclass
class AssignmentResult:
    fg_mask: torch.Tensor        # [N] bool
    matched_gt: torch.Tensor     # [N] long, -1 for background
    dynamic_k: torch.Tensor      # [M] long
    num_fg: int
    num_dropped_gt: int = 0      # GTs with an empty admissible set

    def debug_record(self, costs: torch.Tensor | None = None) -> str:
        """One-line JSON record of the assignment, for inspection dumps."""
        rec = {
            "num_fg": self.num_fg,
            "num_dropped_gt": self.num_dropped_gt,
            "dynamic_k": self.dynamic_k.tolist(),
            "assignments": [
                {"candidate": i, "gt": int(g)}
                for i, g in enumerate(self.matched_gt.tolist()) if g >= 0
            ],
        }
        if costs is not None:
            rec["fg_costs"] = [
                round(float(costs[g, i]), 6)
                for i, g in enumerate(self.matched_gt.tolist()) if g >= 0
            ]
        return json.dumps(rec)


def center_prior(centers: torch.Tensor, strides: torch.Tensor,
                 gt_boxes: torch.Tensor, radius: float) -> torch.Tensor:
    """Admissibility matrix [num_gt, num_candidates].

    A pair is admissible if the location center lies inside the GT box,
    or inside the square of half-side radius * stride around the GT
    center (union of the two tests).
    """
    if gt_boxes.numel() == 0:
        return torch.zeros(0, centers.shape[0], dtype=torch.bool, device=centers.device)
    cx = centers[None, :, 0]
    cy = centers[None, :, 1]
    inside = (
        (cx >= gt_boxes[:, None, 0]) & (cx <= gt_boxes[:, None, 2])
        & (cy >= gt_boxes[:, None, 1]) & (cy <= gt_boxes[:, None, 3])
    )
    gcx = (gt_boxes[:, None, 0] + gt_boxes[:, None, 2]) / 2
    gcy = (gt_boxes[:, None, 1] + gt_boxes[:, None, 3]) / 2
    reach = radius * strides[None, :]
    near = ((cx - gcx).abs() <= reach) & ((cy - gcy).abs() <= reach)
    return inside | near


def _focal_cls_cost(cls_probs: torch.Tensor, obj_probs: torch.Tensor,
                    gt_labels: torch.Tensor, gamma: float, alpha: float) -> torch.Tensor:
    """[M, N] focal classification cost on joint probabilities vs one-hot."""
    num_classes = cls_probs.shape[1]
    joint = (cls_probs * obj_probs[:, None]).clamp(EPS, 1 - EPS)  # [N, C]
    onehot = torch.zeros(
        gt_labels.shape[0], num_classes, device=cls_probs.device, dtype=cls_probs.dtype
    )
    onehot[torch.arange(gt_labels.shape[0]), gt_labels] = 1.0
    p = joint[None, :, :]      # [1, N, C]
    y = onehot[:, None, :]     # [M, 1, C]
    pt = p * y + (1 - p) * (1 - y)
    at = alpha * y + (1 - alpha) * (1 - y)
    return (-at * (1 - pt) ** gamma * torch.log(pt)).sum(-1)


def _bce_cls_cost(cls_probs: torch.Tensor, obj_probs: torch.Tensor,
                  gt_labels: torch.Tensor) -> torch.Tensor:
    num_classes = cls_probs.shape[1]
    joint = (cls_probs * obj_probs[:, None]).clamp(EPS, 1 - EPS)
    onehot = torch.zeros(
        gt_labels.shape[0], num_classes, device=cls_probs.device, dtype=cls_probs.dtype
    )
    onehot[torch.arange(gt_labels.shape[0]), gt_labels] = 1.0
    p = joint[None, :, :]
    y = onehot[:, None, :]
    return (-(y * torch.log(p) + (1 - y) * torch.log(1 - p))).sum(-1)


@torch.no_grad()
def build_cost(cands: CandidateSet, gt_boxes: torch.Tensor, gt_labels: torch.Tensor,
               admissible: torch.Tensor, cfg: SimOTAConfig) -> torch.Tensor:
    """Cost matrix [M, N]; inadmissible pairs are +inf."""
    if ((cands.cls_probs < 0) | (cands.cls_probs > 1)).any():
        raise ValueError("cls_probs must lie in [0, 1]")
    if ((cands.obj_probs < 0) | (cands.obj_probs > 1)).any():
        raise ValueError("obj_probs must lie in [0, 1]")
    cand_xyxy = box_cxcywh_to_xyxy(cands.boxes_cxcywh)
    if cfg.cost_mode == "focal_ciou":
        cls_cost = _focal_cls_cost(
            cands.cls_probs, cands.obj_probs, gt_labels, cfg.focal_gamma, cfg.focal_alpha
        )
        reg_cost = ciou_loss(cand_xyxy[None, :, :], gt_boxes[:, None, :])
    elif cfg.cost_mode == "bce_iou":
        cls_cost = _bce_cls_cost(cands.cls_probs, cands.obj_probs, gt_labels)
        reg_cost = 1 - pairwise_iou(gt_boxes, cand_xyxy)
    else:
        raise ValueError(f"unknown cost mode {cfg.cost_mode!r}")
    cost = cls_cost + cfg.alpha * reg_cost
    return torch.where(admissible, cost, torch.full_like(cost, float("inf")))


def dynamic_k(iou_matrix: torch.Tensor, q: int) -> torch.Tensor:
    """Per-GT candidate budget: max(1, floor(sum of top-min(q, n) IoUs))."""
    if iou_matrix.numel() == 0:
        return torch.ones(iou_matrix.shape[0], dtype=torch.long)
    n = iou_matrix.shape[1]
    top = torch.topk(iou_matrix, min(q, n), dim=1).values
    return top.sum(1).floor().long().clamp(min=1)


@torch.no_grad()
def simota_assign(cands: CandidateSet, gt_boxes: torch.Tensor,
                  gt_labels: torch.Tensor, cfg: SimOTAConfig | None = None
                  ) -> AssignmentResult:
    """Assign candidates to ground truths; deterministic (lower index wins ties)."""
    cfg = cfg or SimOTAConfig()
    n = len(cands)
    device = cands.centers.device
    m = gt_boxes.shape[0]
    if m == 0:
        return AssignmentResult(
            fg_mask=torch.zeros(n, dtype=torch.bool, device=device),
            matched_gt=torch.full((n,), -1, dtype=torch.long, device=device),
            dynamic_k=torch.zeros(0, dtype=torch.long, device=device),
            num_fg=0,
        )

    admissible = center_prior(cands.centers, cands.strides, gt_boxes, cfg.radius)
    cost = build_cost(cands, gt_boxes, gt_labels, admissible, cfg)

    cand_xyxy = box_cxcywh_to_xyxy(cands.boxes_cxcywh)
    ious = pairwise_iou(gt_boxes, cand_xyxy) * admissible
    ks = dynamic_k(ious, cfg.q)

    # per-GT selection of the k lowest-cost admissible candidates
    claims = torch.zeros(m, n, dtype=torch.bool, device=device)
    dropped = 0
    for g in range(m):
        adm = admissible[g]
        n_adm = int(adm.sum())
        if n_adm == 0:
            dropped += 1
            continue
        k = min(int(ks[g]), n_adm)
        order = torch.argsort(cost[g], stable=True)  # inf sorts last
        claims[g, order[:k]] = True

    # conflict resolution: a multiply-claimed candidate keeps its cheapest GT
    matched = torch.full((n,), -1, dtype=torch.long, device=device)
    claimed_any = claims.any(0)
    for c in torch.nonzero(claimed_any).flatten().tolist():
        gs = torch.nonzero(claims[:, c]).flatten()
        if len(gs) == 1:
            matched[c] = gs[0]
        else:
            matched[c] = gs[torch.argmin(cost[gs, c])]

    fg = matched >= 0
    return AssignmentResult(
        fg_mask=fg,
        matched_gt=matched,
        dynamic_k=ks,
        num_fg=int(fg.sum()),
        num_dropped_gt=dropped,
    )
