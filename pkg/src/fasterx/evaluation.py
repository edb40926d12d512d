"""COCO-style average precision with size-stratified variants.

Per class and IoU threshold: detections are ranked by score and matched
greedily to unmatched ground truths (highest IoU first); AP is the
101-point interpolated area under the precision-recall curve. mAP
averages classes with at least one ground truth over the ten thresholds
0.50:0.05:0.95. Size-stratified APs treat out-of-bucket ground truths as
ignore regions: detections matching them are discarded, not penalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_AREA = 32 * 32
LARGE_AREA = 96 * 96

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0, 1, 101)


@dataclass
class ImageDetections:
    boxes: np.ndarray   # [N, 4] xyxy
    scores: np.ndarray  # [N]
    labels: np.ndarray  # [N]


@dataclass
class ImageGroundTruth:
    boxes: np.ndarray   # [M, 4] xyxy
    labels: np.ndarray  # [M]

    def areas(self) -> np.ndarray:
        if self.boxes.size == 0:
            return np.zeros(0)
        return (self.boxes[:, 2] - self.boxes[:, 0]) * (self.boxes[:, 3] - self.boxes[:, 1])


def size_bucket(area: float) -> str:
    if area < SMALL_AREA:
        return "small"
    if area <= LARGE_AREA:
        return "medium"
    return "large"


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.size == 0 or b.size == 0:
        return np.zeros((len(a), len(b)))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / np.maximum(union, 1e-9)


def _class_ap(dets, gts, cls: int, thr: float, bucket: str | None) -> float | None:
    """AP for one class at one IoU threshold; None if the class has no
    (in-bucket) ground truth anywhere."""
    rows = []  # (score, image_idx, det_idx)
    for i, d in enumerate(dets):
        for j in np.nonzero(d.labels == cls)[0]:
            rows.append((float(d.scores[j]), i, int(j)))
    rows.sort(key=lambda r: (-r[0], r[1], r[2]))

    num_gt = 0
    gt_state = []  # per image: (boxes, matched flags, ignore flags)
    for g in gts:
        mask = g.labels == cls
        boxes = g.boxes[mask]
        areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]) if boxes.size else np.zeros(0)
        ignore = (
            np.array([size_bucket(a) != bucket for a in areas], dtype=bool)
            if bucket else np.zeros(len(boxes), dtype=bool)
        )
        num_gt += int((~ignore).sum())
        gt_state.append([boxes, np.zeros(len(boxes), dtype=bool), ignore])

    if num_gt == 0:
        return None
    if not rows:
        return 0.0

    tp, fp = [], []
    for score, img, j in rows:
        boxes, matched, ignore = gt_state[img]
        det_box = dets[img].boxes[j][None, :]
        if len(boxes) == 0:
            fp.append(1); tp.append(0)
            continue
        ious = _iou_matrix(det_box, boxes)[0]
        # prefer a real (non-ignored, unmatched) GT; else fall back to an
        # ignored one, which absorbs the detection without penalty
        cand = np.where((~matched) & (~ignore) & (ious >= thr))[0]
        if cand.size:
            best = cand[np.argmax(ious[cand])]
            matched[best] = True
            tp.append(1); fp.append(0)
            continue
        cand_ign = np.where((~matched) & ignore & (ious >= thr))[0]
        if cand_ign.size:
            best = cand_ign[np.argmax(ious[cand_ign])]
            matched[best] = True
            continue  # neither TP nor FP
        fp.append(1); tp.append(0)

    if not tp:
        return 0.0
    tp = np.cumsum(tp)
    fp = np.cumsum(fp)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1e-9)
    # monotone non-increasing precision envelope
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    interp = np.zeros_like(RECALL_POINTS)
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = idx < len(precision)
    interp[valid] = precision[idx[valid]]
    return float(interp.mean())


def evaluate(dets: list[ImageDetections], gts: list[ImageGroundTruth],
             num_classes: int, iou_thresholds=IOU_THRESHOLDS) -> dict:
    """Returns {mAP, AP50, AP_S, AP_M, AP_L}; bucket APs are NaN when the
    bucket is empty everywhere."""
    if len(dets) != len(gts):
        raise ValueError("detections / ground-truth image counts differ")

    def mean_ap(bucket: str | None, thresholds) -> float:
        per_class = []
        for c in range(num_classes):
            aps = [_class_ap(dets, gts, c, t, bucket) for t in thresholds]
            aps = [a for a in aps if a is not None]
            if aps:
                per_class.append(float(np.mean(aps)))
        return float(np.mean(per_class)) if per_class else float("nan")

    return {
        "mAP": mean_ap(None, iou_thresholds),
        "AP50": mean_ap(None, [0.5]),
        "AP_S": mean_ap("small", iou_thresholds),
        "AP_M": mean_ap("medium", iou_thresholds),
        "AP_L": mean_ap("large", iou_thresholds),
    }
