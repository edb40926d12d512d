"""Training loop: SGD with warmup + cosine annealing, distillation-aware
loss, line-delimited JSON logging, and periodic evaluation."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from fasterx.assignment import SimOTAConfig
from fasterx.data import DetectionDataset
from fasterx.distill import training_losses
from fasterx.evaluation import ImageDetections, ImageGroundTruth, evaluate
from fasterx.model import ModelConfig, build_model, save_checkpoint


@dataclass
class OptimizerConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 1
    final_lr_ratio: float = 0.05


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    mosaic: bool = False
    eval_interval: int = 10
    score_thr: float = 0.05
    nms_thr: float = 0.45
    train_manifest: str = ""
    val_manifest: str = ""
    out_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)


def _lr_at(cfg: OptimizerConfig, epoch_frac: float, total_epochs: int) -> float:
    """Linear warmup to cfg.lr, then cosine to final_lr_ratio * lr."""
    if cfg.warmup_epochs > 0 and epoch_frac < cfg.warmup_epochs:
        return cfg.lr * epoch_frac / cfg.warmup_epochs
    span = max(total_epochs - cfg.warmup_epochs, 1e-9)
    t = (epoch_frac - cfg.warmup_epochs) / span
    floor = cfg.lr * cfg.final_lr_ratio
    return floor + 0.5 * (cfg.lr - floor) * (1 + math.cos(math.pi * min(t, 1.0)))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size].tolist()


@torch.no_grad()
def evaluate_model(model, dataset: DetectionDataset, score_thr: float = 0.05,
                   nms_thr: float = 0.45, batch_size: int = 8) -> dict:
    model.eval()
    dets, gts = [], []
    for i in range(0, len(dataset), batch_size):
        items = [dataset[j] for j in range(i, min(i + batch_size, len(dataset)))]
        images = torch.stack([it[0] for it in items])
        results = model.predict(images, score_thr=score_thr, nms_thr=nms_thr)
        for (img, boxes, labels), res in zip(items, results):
            dets.append(ImageDetections(
                boxes=res["boxes"].numpy(), scores=res["scores"].numpy(),
                labels=res["labels"].numpy(),
            ))
            gts.append(ImageGroundTruth(boxes=boxes.numpy(), labels=labels.numpy()))
    return evaluate(dets, gts, num_classes=model.cfg.num_classes)


def train_run(cfg: TrainConfig, log_name: str = "train_log.jsonl") -> dict:
    """Run training; returns final metrics. Writes resolved config, log
    stream, and last/best checkpoints into cfg.out_dir."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    torch.manual_seed(cfg.seed)

    model = build_model(cfg.model, seed=cfg.seed)
    train_ds = DetectionDataset(
        cfg.train_manifest, cfg.model.input_size, cfg.model.num_classes,
        use_mosaic=cfg.mosaic, seed=cfg.seed,
    )
    val_ds = (
        DetectionDataset(cfg.val_manifest, cfg.model.input_size, cfg.model.num_classes)
        if cfg.val_manifest else None
    )

    with open(os.path.join(cfg.out_dir, "resolved_config.json"), "w") as f:
        json.dump(_cfg_dict(cfg), f, indent=2, default=str)

    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.optimizer.lr,
        momentum=cfg.optimizer.momentum, weight_decay=cfg.optimizer.weight_decay,
    )
    assign_cfg = SimOTAConfig()
    log_path = os.path.join(cfg.out_dir, log_name)
    best_ap50 = -1.0
    metrics: dict = {}
    steps_per_epoch = max(1, math.ceil(len(train_ds) / cfg.batch_size))

    with open(log_path, "w") as log:
        for epoch in range(cfg.epochs):
            model.train()
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, epoch)))
            stats = {"loss": 0.0, "steps": 0}
            for step, idxs in enumerate(_batches(len(train_ds), cfg.batch_size, rng)):
                lr = _lr_at(cfg.optimizer, epoch + step / steps_per_epoch, cfg.epochs)
                for group in opt.param_groups:
                    group["lr"] = lr
                items = [train_ds[i] for i in idxs]
                images = torch.stack([it[0] for it in items])
                targets = [(it[1], it[2]) for it in items]
                loss = training_losses(
                    model, images, targets, epoch, assign_cfg, stats
                )
                opt.zero_grad()
                loss.backward()
                opt.step()
                stats["loss"] += float(loss.detach())
                stats["steps"] += 1

            record = {
                "epoch": epoch,
                "phase": _phase(cfg.model, epoch),
                "lr": round(lr, 6),
                "loss": round(stats["loss"] / stats["steps"], 6),
                "num_fg": stats.get("num_fg", 0),
                "assign_calls": stats.get("assign_calls", 0),
            }
            for key in ("loss_cls", "loss_reg", "loss_obj", "loss_align"):
                if stats.get(key):
                    record[key] = round(stats[key] / stats["steps"], 6)

            is_last = epoch == cfg.epochs - 1
            if val_ds and (is_last or (epoch + 1) % cfg.eval_interval == 0):
                metrics = evaluate_model(model, val_ds, cfg.score_thr, cfg.nms_thr)
                record.update({k: round(v, 6) for k, v in metrics.items()
                               if v == v})  # skip NaN buckets
                if metrics["AP50"] >= best_ap50:
                    best_ap50 = metrics["AP50"]
                    save_checkpoint(model, os.path.join(cfg.out_dir, "best.ckpt"),
                                    meta={"epoch": epoch, **_finite(metrics)})
            log.write(json.dumps(record) + "\n")
            log.flush()
            save_checkpoint(model, os.path.join(cfg.out_dir, "last.ckpt"),
                            meta={"epoch": epoch})
    return metrics


def _phase(model_cfg: ModelConfig, epoch: int) -> str:
    if not model_cfg.distill.enabled:
        return "plain"
    return "joint" if epoch < model_cfg.distill.warmup_epochs else "guided"


def _finite(metrics: dict) -> dict:
    return {k: v for k, v in metrics.items() if v == v}


def _cfg_dict(cfg) -> dict:
    from dataclasses import asdict
    return asdict(cfg)
