"""Independent reference implementations used only by tests.

Everything here is deliberately written in plain Python + NumPy with no
torch and no imports from the package under test, so agreement between
the two is meaningful.
"""

from __future__ import annotations

import math

import numpy as np

EPS = 1e-9


def np_iou(a, b):
    """IoU of two xyxy boxes (plain floats)."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    return inter / (area_a + area_b - inter + EPS)


def np_ciou_loss(pred, gt):
    u = np_iou(pred, gt)
    pcx, pcy = (pred[0] + pred[2]) / 2, (pred[1] + pred[3]) / 2
    gcx, gcy = (gt[0] + gt[2]) / 2, (gt[1] + gt[3]) / 2
    d2 = (pcx - gcx) ** 2 + (pcy - gcy) ** 2
    ex1, ey1 = min(pred[0], gt[0]), min(pred[1], gt[1])
    ex2, ey2 = max(pred[2], gt[2]), max(pred[3], gt[3])
    c2 = (ex2 - ex1) ** 2 + (ey2 - ey1) ** 2
    pw, ph = max(0.0, pred[2] - pred[0]), max(0.0, pred[3] - pred[1])
    gw, gh = max(0.0, gt[2] - gt[0]), max(0.0, gt[3] - gt[1])
    v = (4 / math.pi**2) * (
        math.atan(gw / (gh + EPS)) - math.atan(pw / (ph + EPS))
    ) ** 2
    a2 = v / ((1 - u) + v + EPS)
    return 1 - u + d2 / (c2 + EPS) + a2 * v


def np_focal_cls_cost(cls_probs, obj_prob, label, gamma, alpha):
    """Focal cost of one candidate against one GT's one-hot class vector."""
    total = 0.0
    for c, p in enumerate(cls_probs):
        p = min(max(p * obj_prob, EPS), 1 - EPS)
        y = 1.0 if c == label else 0.0
        pt = p if y else 1 - p
        at = alpha if y else 1 - alpha
        total += -at * (1 - pt) ** gamma * math.log(pt)
    return total


def oracle_simota(centers, strides, boxes_cxcywh, cls_probs, obj_probs,
                  gt_boxes, gt_labels, radius=2.5, q=10, alpha=3.0,
                  gamma=2.0, focal_alpha=0.25):
    """Exhaustive SimOTA: same selection rule, scalar-by-scalar.

    All inputs are NumPy arrays / lists; gt_boxes are xyxy. Returns
    (matched_gt list with -1 for background, dynamic_k list, dropped count).
    """
    n = len(centers)
    m = len(gt_boxes)
    if m == 0:
        return [-1] * n, [], 0

    def box_xyxy(cxcywh):
        cx, cy, w, h = cxcywh
        return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    cand_xyxy = [box_xyxy(b) for b in boxes_cxcywh]

    admissible = np.zeros((m, n), dtype=bool)
    for g in range(m):
        x1, y1, x2, y2 = gt_boxes[g]
        gcx, gcy = (x1 + x2) / 2, (y1 + y2) / 2
        for c in range(n):
            px, py = centers[c]
            inside = x1 <= px <= x2 and y1 <= py <= y2
            reach = radius * strides[c]
            near = abs(px - gcx) <= reach and abs(py - gcy) <= reach
            admissible[g, c] = inside or near

    cost = np.full((m, n), np.inf)
    ious = np.zeros((m, n))
    for g in range(m):
        for c in range(n):
            if not admissible[g, c]:
                continue
            ious[g, c] = np_iou(gt_boxes[g], cand_xyxy[c])
            cost[g, c] = np_focal_cls_cost(
                cls_probs[c], obj_probs[c], gt_labels[g], gamma, focal_alpha
            ) + alpha * np_ciou_loss(cand_xyxy[c], gt_boxes[g])

    ks = []
    for g in range(m):
        top = sorted(ious[g], reverse=True)[: min(q, n)]
        ks.append(max(1, int(math.floor(sum(top)))))

    claims = [set() for _ in range(m)]
    dropped = 0
    for g in range(m):
        adm = [c for c in range(n) if admissible[g, c]]
        if not adm:
            dropped += 1
            continue
        k = min(ks[g], len(adm))
        # exhaustive selection of the k cheapest, lower index wins ties
        chosen = sorted(adm, key=lambda c: (cost[g, c], c))[:k]
        claims[g] = set(chosen)

    matched = [-1] * n
    for c in range(n):
        claimants = [g for g in range(m) if c in claims[g]]
        if not claimants:
            continue
        matched[c] = min(claimants, key=lambda g: (cost[g, c], g))
    return matched, ks, dropped


def random_simota_instance(rng, max_gt=3, max_cands=20, num_classes=4,
                           image_size=64):
    """Random candidates + GTs for oracle comparisons (NumPy RNG)."""
    n = int(rng.integers(1, max_cands + 1))
    m = int(rng.integers(0, max_gt + 1))
    centers = rng.uniform(0, image_size, size=(n, 2))
    strides = rng.choice([4, 8, 16], size=n).astype(float)
    cxy = rng.uniform(0, image_size, size=(n, 2))
    cwh = rng.uniform(2, image_size / 2, size=(n, 2))
    boxes = np.concatenate([cxy, cwh], axis=1)
    cls_probs = rng.uniform(0.02, 0.98, size=(n, num_classes))
    obj_probs = rng.uniform(0.02, 0.98, size=n)
    gxy = rng.uniform(4, image_size - 4, size=(m, 2))
    gwh = rng.uniform(4, image_size / 2, size=(m, 2))
    gt_boxes = np.concatenate([gxy - gwh / 2, gxy + gwh / 2], axis=1)
    gt_labels = rng.integers(0, num_classes, size=m)
    return centers, strides, boxes, cls_probs, obj_probs, gt_boxes, gt_labels
