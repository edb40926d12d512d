"""Auxiliary-head online distillation protocol.

Two phases, split by ``warmup_epochs``: during warmup the student and
auxiliary heads each run their own label assignment and learn jointly;
afterwards assignment runs once on the (detached) auxiliary predictions
and that single result supervises both heads. A mean-square feature
alignment term couples the two heads in both phases. The auxiliary
branch is removed before inference (see ``fasterx.model.strip_aux``).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from fasterx.assignment import CandidateSet, SimOTAConfig, simota_assign
from fasterx.losses import LossBundle, detection_loss, feature_alignment
from fasterx.model import FasterX, flatten_outputs


def _candidates(flat: dict) -> CandidateSet:
    return CandidateSet(
        centers=flat["centers"],
        strides=flat["strides"],
        boxes_cxcywh=flat["boxes_cxcywh"].detach(),
        cls_probs=torch.sigmoid(flat["cls_logits"]).detach(),
        obj_probs=torch.sigmoid(flat["obj_logits"]).detach(),
    )


def _image_loss(flat: dict, assignment, boxes, labels) -> LossBundle:
    return detection_loss(
        flat["cls_logits"], flat["obj_logits"], flat["boxes_cxcywh"],
        assignment, boxes, labels,
    )


def _aligned_features(model: FasterX, student_outputs, aux_outputs):
    """Project student stream features to the auxiliary width and spatial
    size; returns two parallel lists of tensors."""
    fs, fa = [], []
    for level, (s, a) in enumerate(zip(student_outputs, aux_outputs)):
        proj = model.distill_proj[level]
        for key in ("cls_feat", "reg_feat"):
            sf = proj(s.features[key])
            af = a.features[key]
            if sf.shape[-2:] != af.shape[-2:]:
                sf = F.interpolate(sf, size=af.shape[-2:], mode="nearest")
            fs.append(sf)
            fa.append(af)
    return fs, fa


def training_losses(model: FasterX, images: torch.Tensor, targets: list,
                    epoch: int, assign_cfg: SimOTAConfig | None = None,
                    stats: dict | None = None) -> torch.Tensor:
    """Total training loss for one batch under the distillation protocol.

    ``targets`` is a list of (gt_boxes_xyxy, gt_labels) per image. When
    distillation is disabled this reduces to the plain detection loss on
    the student head. ``stats`` (if given) accumulates scalar diagnostics,
    including the number of assignment invocations.
    """
    cfg = model.cfg.distill
    assign_cfg = assign_cfg or SimOTAConfig()
    stats = stats if stats is not None else {}
    stats.setdefault("assign_calls", 0)
    stats.setdefault("num_fg", 0)
    for key in ("loss_cls", "loss_reg", "loss_obj", "loss_align"):
        stats.setdefault(key, 0.0)

    batch = images.shape[0]
    if not cfg.enabled:
        outputs = model(images)
        total = images.new_zeros(())
        for b in range(batch):
            boxes, labels = targets[b]
            flat = flatten_outputs(outputs, b)
            assignment = simota_assign(_candidates(flat), boxes, labels, assign_cfg)
            stats["assign_calls"] += 1
            bundle = _image_loss(flat, assignment, boxes, labels)
            total = total + bundle.total
            _accumulate(stats, bundle)
        return total / batch

    student_outputs, aux_outputs = model.forward_with_aux(images)
    guided = epoch >= cfg.warmup_epochs
    total = images.new_zeros(())
    for b in range(batch):
        boxes, labels = targets[b]
        s_flat = flatten_outputs(student_outputs, b)
        a_flat = flatten_outputs(aux_outputs, b)
        if guided:
            shared = simota_assign(_candidates(a_flat), boxes, labels, assign_cfg)
            stats["assign_calls"] += 1
            s_assign = a_assign = shared
        else:
            s_assign = simota_assign(_candidates(s_flat), boxes, labels, assign_cfg)
            a_assign = simota_assign(_candidates(a_flat), boxes, labels, assign_cfg)
            stats["assign_calls"] += 2
        s_bundle = _image_loss(s_flat, s_assign, boxes, labels)
        a_bundle = _image_loss(a_flat, a_assign, boxes, labels)
        total = total + s_bundle.total + a_bundle.total
        _accumulate(stats, s_bundle)

    if cfg.lam > 0:
        fs, fa = _aligned_features(model, student_outputs, aux_outputs)
        align = sum(feature_alignment(s, a) for s, a in zip(fs, fa)) / len(fs)
        total = total + cfg.lam * align * batch
        stats["loss_align"] += float(align.detach())
    return total / batch


def _accumulate(stats: dict, bundle: LossBundle) -> None:
    stats["num_fg"] += bundle.num_fg
    stats["loss_cls"] += float(bundle.cls.detach())
    stats["loss_reg"] += float(bundle.reg.detach())
    stats["loss_obj"] += float(bundle.obj.detach())
