"""Command-line surface: train, eval, profile, predict, synth-data, plot.

Every command is non-interactive, exits nonzero on error, and writes its
resolved configuration next to its outputs. The ``FASTERX_RUN_DIR``
environment variable overrides the root of run output directories.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from fasterx.config import resolve_train_config
from fasterx.data import (DetectionDataset, SynthSpec, letterbox, synth_dataset,
                          unletterbox_boxes)
from fasterx.model import (ModelConfig, build_model, fasterx_config,
                           load_checkpoint, yolox_equivalent_config)
from fasterx.profiler import profile_model, time_forward
from fasterx.train import evaluate_model, train_run

PRESETS = {
    "fasterx-s": lambda nc: fasterx_config("s", nc),
    "fasterx-tiny": lambda nc: fasterx_config("tiny", nc),
    "fasterx-nano": lambda nc: fasterx_config("nano", nc),
    "yolox-s": lambda nc: yolox_equivalent_config("s", nc),
    "yolox-tiny": lambda nc: yolox_equivalent_config("tiny", nc),
    "yolox-nano": lambda nc: yolox_equivalent_config("nano", nc),
    "yolox-s-p4": lambda nc: yolox_equivalent_config("s", nc, num_heads=4),
    "yolox-tiny-p4": lambda nc: yolox_equivalent_config("tiny", nc, num_heads=4),
    "yolox-nano-p4": lambda nc: yolox_equivalent_config("nano", nc, num_heads=4),
}


def _run_dir(path: str) -> str:
    root = os.environ.get("FASTERX_RUN_DIR")
    if root:
        return os.path.join(root, os.path.basename(path.rstrip("/")))
    return path


def cmd_train(args) -> int:
    cfg = resolve_train_config(args.config, args.set or [])
    if args.train_manifest:
        cfg.train_manifest = args.train_manifest
    if args.val_manifest:
        cfg.val_manifest = args.val_manifest
    if args.out_dir:
        cfg.out_dir = args.out_dir
    cfg.out_dir = _run_dir(cfg.out_dir)
    if not cfg.train_manifest:
        print("error: no training manifest given", file=sys.stderr)
        return 2
    metrics = train_run(cfg)
    if metrics:
        print(json.dumps(metrics))
    print(f"run complete; outputs in {cfg.out_dir}")
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    dataset = DetectionDataset(args.manifest, model.cfg.input_size,
                               model.cfg.num_classes)
    metrics = evaluate_model(model, dataset, args.score_thr, args.nms_thr)
    print(json.dumps(metrics, indent=2))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(metrics, f, indent=2)
    return 0


def _preset_config(args) -> ModelConfig:
    if args.preset:
        return PRESETS[args.preset](args.num_classes)
    cfg = resolve_train_config(args.config, args.set or [])
    return cfg.model


def cmd_profile(args) -> int:
    cfg = _preset_config(args)
    if args.input_size:
        cfg.input_size = args.input_size
    model = build_model(cfg, seed=0)
    report = profile_model(model, args.input_size or cfg.input_size)
    print(report.to_text())
    if args.time:
        stats = time_forward(model, args.input_size or cfg.input_size, reps=args.reps)
        print(f"latency per image: mean {stats['mean'] * 1e3:.1f} ms, "
              f"p50 {stats['p50'] * 1e3:.1f} ms, p95 {stats['p95'] * 1e3:.1f} ms "
              f"({stats['reps']} reps)")
    if args.compare:
        other_cfg = PRESETS[args.compare](args.num_classes)
        if args.input_size:
            other_cfg.input_size = args.input_size
        other = build_model(other_cfg, seed=0)
        other_report = profile_model(other, args.input_size or other_cfg.input_size)
        print(f"compare vs {args.compare}: "
              f"params {report.params / 1e6:.2f}M vs {other_report.params / 1e6:.2f}M "
              f"(delta {(report.params - other_report.params) / 1e6:+.2f}M), "
              f"flops {report.flop_units / 1e9:.2f}G vs "
              f"{other_report.flop_units / 1e9:.2f}G "
              f"(delta {(report.flop_units - other_report.flop_units) / 1e9:+.2f}G)")
    if args.out:
        with open(args.out, "w") as f:
            f.write(report.to_machine_lines() + "\n")
    return 0


def cmd_predict(args) -> int:
    from PIL import Image

    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    paths = []
    for p in args.images:
        if os.path.isdir(p):
            paths.extend(sorted(
                os.path.join(p, n) for n in os.listdir(p)
                if n.lower().endswith((".png", ".jpg", ".jpeg"))
            ))
        else:
            paths.append(p)
    lines = []
    for path in paths:
        img = np.asarray(Image.open(path).convert("RGB"))
        boxed, scale, px, py = letterbox(img, model.cfg.input_size)
        tensor = torch.from_numpy(boxed.astype(np.float32) / 255).permute(2, 0, 1)
        res = model.predict(tensor.unsqueeze(0), args.score_thr, args.nms_thr)[0]
        boxes = unletterbox_boxes(res["boxes"].numpy(), scale, px, py)
        image_id = os.path.splitext(os.path.basename(path))[0]
        for box, score, label in zip(boxes, res["scores"], res["labels"]):
            lines.append(f"{image_id} {int(label)} {float(score):.4f} "
                         f"{box[0]:.1f} {box[1]:.1f} {box[2]:.1f} {box[3]:.1f}")
        if args.draw_dir:
            os.makedirs(args.draw_dir, exist_ok=True)
            _draw(img, boxes, res["labels"].numpy(),
                  os.path.join(args.draw_dir, os.path.basename(path)))
    out = args.out or "detections.txt"
    with open(out, "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
    print(f"wrote {len(lines)} detections to {out}")
    return 0


def _draw(img: np.ndarray, boxes, labels, path) -> None:
    from fasterx.data import CLASS_COLORS
    canvas = img.copy()
    h, w = canvas.shape[:2]
    for box, label in zip(boxes, labels):
        x1, y1, x2, y2 = (int(max(0, min(v, lim - 1)))
                          for v, lim in zip(box, (w, h, w, h)))
        color = CLASS_COLORS[int(label) % len(CLASS_COLORS)]
        canvas[y1, x1:x2] = color
        canvas[min(y2, h - 1), x1:x2] = color
        canvas[y1:y2, x1] = color
        canvas[y1:y2, min(x2, w - 1)] = color
    from PIL import Image
    Image.fromarray(canvas).save(path)


def cmd_synth_data(args) -> int:
    spec = SynthSpec(
        num_images=args.num_images, image_size=args.image_size,
        num_classes=args.num_classes, seed=args.seed,
        small_frac=args.small_frac,
    )
    manifest = synth_dataset(spec, args.out)
    with open(os.path.join(args.out, "synth_spec.json"), "w") as f:
        json.dump(spec.__dict__, f, indent=2)
    print(f"wrote {spec.num_images} images; manifest at {manifest}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for log_path in args.logs:
        label = os.path.splitext(os.path.basename(log_path))[0]
        if label in ("train_log",):
            label = os.path.basename(os.path.dirname(os.path.abspath(log_path)))
        epochs, ap50s, maps = [], [], []
        with open(log_path) as f:
            for line in f:
                rec = json.loads(line)
                if "AP50" in rec:
                    epochs.append(rec["epoch"])
                    ap50s.append(rec["AP50"])
                    maps.append(rec.get("mAP", float("nan")))
        axes[0].plot(epochs, ap50s, marker="o", label=label)
        axes[1].plot(epochs, maps, marker="o", label=label)
    for ax, title in zip(axes, ("AP50", "mAP")):
        ax.set_xlabel("epoch")
        ax.set_ylabel(title)
        ax.set_title(f"{title} vs epoch")
        ax.legend()
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fasterx", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    t.add_argument("--train-manifest")
    t.add_argument("--val-manifest")
    t.add_argument("--out-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--score-thr", type=float, default=0.05)
    e.add_argument("--nms-thr", type=float, default=0.45)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("profile", help="report params / GFLOPs for a config")
    pr.add_argument("--preset", choices=sorted(PRESETS))
    pr.add_argument("--config")
    pr.add_argument("--set", action="append", metavar="KEY=VALUE")
    pr.add_argument("--num-classes", type=int, default=10)
    pr.add_argument("--input-size", type=int, default=0)
    pr.add_argument("--compare", choices=sorted(PRESETS))
    pr.add_argument("--time", action="store_true", help="also time the forward pass")
    pr.add_argument("--reps", type=int, default=10)
    pr.add_argument("--out", help="write machine-readable report")
    pr.set_defaults(func=cmd_profile)

    pd = sub.add_parser("predict", help="run detection on images")
    pd.add_argument("--checkpoint", required=True)
    pd.add_argument("--images", nargs="+", required=True)
    pd.add_argument("--score-thr", type=float, default=0.3)
    pd.add_argument("--nms-thr", type=float, default=0.45)
    pd.add_argument("--out")
    pd.add_argument("--draw-dir", help="write box-overlay images here")
    pd.set_defaults(func=cmd_predict)

    sd = sub.add_parser("synth-data", help="generate a synthetic dataset")
    sd.add_argument("--out", required=True)
    sd.add_argument("--num-images", type=int, default=500)
    sd.add_argument("--image-size", type=int, default=128)
    sd.add_argument("--num-classes", type=int, default=10)
    sd.add_argument("--small-frac", type=float, default=0.7)
    sd.add_argument("--seed", type=int, default=0)
    sd.set_defaults(func=cmd_synth_data)

    pl = sub.add_parser("plot", help="plot training curves from log streams")
    pl.add_argument("--logs", nargs="+", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # CLI boundary: report and exit nonzero
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
