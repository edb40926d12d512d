"""Dataset ingestion, synthesis, and preprocessing.

Annotation files follow the VisDrone convention: one object per line,
``left,top,width,height,score,category,truncation,occlusion`` as
integers, one file per image. A dataset manifest is a plain-text list of
``image_path<TAB>annotation_path`` pairs relative to the manifest.

The synthetic generator draws colored rectangles (class-coded hue) on
textured backgrounds, skewed toward small objects, as a desk-scale
stand-in for aerial smalls-heavy data.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

# saturated, well-separated class colors (RGB); class identity is the hue
CLASS_COLORS = np.array([
    (220, 40, 40), (40, 200, 60), (50, 80, 230), (230, 220, 40), (200, 50, 210),
    (40, 210, 210), (240, 140, 30), (130, 240, 140), (150, 90, 240), (250, 250, 250),
], dtype=np.uint8)


class AnnotationError(ValueError):
    pass


@dataclass
class AnnotationRecord:
    bbox_left: int
    bbox_top: int
    width: int
    height: int
    score: int
    category: int
    truncation: int = 0
    occlusion: int = 0

    def to_xyxy(self) -> tuple[int, int, int, int]:
        return (self.bbox_left, self.bbox_top,
                self.bbox_left + self.width, self.bbox_top + self.height)

    def to_line(self) -> str:
        return (f"{self.bbox_left},{self.bbox_top},{self.width},{self.height},"
                f"{self.score},{self.category},{self.truncation},{self.occlusion}")


def parse_annotations(path, num_classes: int | None = None
                      ) -> tuple[list[AnnotationRecord], int]:
    """Parse one annotation file; returns (records, dropped_count).

    Zero-area boxes and out-of-range categories are dropped and counted.
    Malformed lines raise with the offending line number.
    """
    records, dropped = [], 0
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip().rstrip(",")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 8:
                raise AnnotationError(f"{path}:{lineno}: expected >= 8 fields, got {len(parts)}")
            try:
                vals = [int(p) for p in parts[:8]]
            except ValueError as e:
                raise AnnotationError(f"{path}:{lineno}: non-integer field ({e})") from None
            rec = AnnotationRecord(*vals)
            if rec.width <= 0 or rec.height <= 0:
                dropped += 1
                continue
            if num_classes is not None and not (0 <= rec.category < num_classes):
                dropped += 1
                continue
            records.append(rec)
    return records, dropped


def write_annotations(records: list[AnnotationRecord], path) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(rec.to_line() + "\n")


@dataclass
class SynthSpec:
    num_images: int = 500
    image_size: int = 128
    num_classes: int = 10
    min_objects: int = 2
    max_objects: int = 6
    small_frac: float = 0.7   # target share of small-bucket objects, >= 0.6
    max_aspect: float = 5.0   # max side / min side
    seed: int = 0

    def __post_init__(self):
        if self.small_frac < 0.6:
            raise ValueError("small object share must be at least 0.6")
        if not (1.0 <= self.max_aspect):
            raise ValueError("max_aspect must be >= 1")


def _synth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Muted low-frequency texture so objects stand out but aren't trivial."""
    coarse = rng.integers(60, 140, size=(size // 8, size // 8, 3), dtype=np.int64)
    img = np.asarray(
        Image.fromarray(coarse.astype(np.uint8)).resize((size, size), Image.BILINEAR)
    ).astype(np.int16)
    noise = rng.integers(-12, 13, size=img.shape, dtype=np.int16)
    return np.clip(img + noise, 0, 255).astype(np.uint8)


def _synth_object_size(rng: np.random.Generator, spec: SynthSpec) -> tuple[int, int]:
    aspect = float(rng.uniform(1.0, spec.max_aspect))
    if rng.random() < spec.small_frac:
        # area < 32^2: short side in [4, 31/aspect]
        short = int(rng.integers(4, max(5, int(31 / aspect ** 0.5)) + 1))
    else:
        short = int(rng.integers(int(33 / aspect ** 0.5) + 1,
                                 max(int(33 / aspect ** 0.5) + 3, spec.image_size // 3)))
    long = max(short, min(int(round(short * aspect)), spec.image_size - 2))
    if rng.random() < 0.5:
        return long, short
    return short, long


def synth_image(rng: np.random.Generator, spec: SynthSpec
                ) -> tuple[np.ndarray, list[AnnotationRecord]]:
    img = _synth_background(rng, spec.image_size)
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    records = []
    for _ in range(n):
        w, h = _synth_object_size(rng, spec)
        if w >= spec.image_size - 1 or h >= spec.image_size - 1:
            continue
        x = int(rng.integers(0, spec.image_size - w))
        y = int(rng.integers(0, spec.image_size - h))
        cat = int(rng.integers(0, spec.num_classes))
        color = CLASS_COLORS[cat % len(CLASS_COLORS)].astype(np.int16)
        jitter = rng.integers(-15, 16, size=3)
        fill = np.clip(color + jitter, 0, 255).astype(np.uint8)
        img[y : y + h, x : x + w] = fill
        # darker border gives each object a crisp edge
        edge = np.clip(color // 2, 0, 255).astype(np.uint8)
        img[y, x : x + w] = edge
        img[y + h - 1, x : x + w] = edge
        img[y : y + h, x] = edge
        img[y : y + h, x + w - 1] = edge
        records.append(AnnotationRecord(x, y, w, h, score=1, category=cat))
    return img, records


def synth_dataset(spec: SynthSpec, out_dir) -> str:
    """Write images, annotations and a manifest; returns the manifest path.

    Deterministic per seed: each image uses its own child RNG stream.
    """
    out_dir = str(out_dir)
    img_dir = os.path.join(out_dir, "images")
    ann_dir = os.path.join(out_dir, "annotations")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(ann_dir, exist_ok=True)
    root = np.random.SeedSequence(spec.seed)
    children = root.spawn(spec.num_images)
    manifest_lines = []
    for i in range(spec.num_images):
        rng = np.random.default_rng(children[i])
        img, records = synth_image(rng, spec)
        img_path = os.path.join("images", f"{i:06d}.png")
        ann_path = os.path.join("annotations", f"{i:06d}.txt")
        Image.fromarray(img).save(os.path.join(out_dir, img_path))
        write_annotations(records, os.path.join(out_dir, ann_path))
        manifest_lines.append(f"{img_path}\t{ann_path}")
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as f:
        f.write("\n".join(manifest_lines) + "\n")
    return manifest


def mosaic(samples: list, out_size: int, rng: np.random.Generator
           ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """2x2 collage of four (image, boxes_xyxy, labels) samples.

    The collage center is drawn uniformly from the middle half of the
    canvas; each source image is scaled to fill its quadrant. Boxes are
    transformed per quadrant and clipped; fragments under 2 px are dropped.
    """
    if len(samples) != 4:
        raise ValueError("mosaic needs exactly four samples")
    canvas = np.zeros((out_size, out_size, 3), dtype=np.uint8)
    cx = int(rng.integers(out_size // 4, 3 * out_size // 4 + 1))
    cy = int(rng.integers(out_size // 4, 3 * out_size // 4 + 1))
    quads = [(0, 0, cx, cy), (cx, 0, out_size, cy),
             (0, cy, cx, out_size), (cx, cy, out_size, out_size)]
    all_boxes, all_labels = [], []
    for (x1, y1, x2, y2), (img, boxes, labels) in zip(quads, samples):
        qw, qh = x2 - x1, y2 - y1
        if qw <= 0 or qh <= 0:
            continue
        sh, sw = img.shape[:2]
        resized = np.asarray(Image.fromarray(img).resize((qw, qh), Image.BILINEAR))
        canvas[y1:y2, x1:x2] = resized
        if len(boxes) == 0:
            continue
        sx, sy = qw / sw, qh / sh
        b = np.asarray(boxes, dtype=np.float64).copy()
        b[:, [0, 2]] = b[:, [0, 2]] * sx + x1
        b[:, [1, 3]] = b[:, [1, 3]] * sy + y1
        b[:, [0, 2]] = b[:, [0, 2]].clip(x1, x2)
        b[:, [1, 3]] = b[:, [1, 3]].clip(y1, y2)
        keep = ((b[:, 2] - b[:, 0]) >= 2) & ((b[:, 3] - b[:, 1]) >= 2)
        all_boxes.append(b[keep])
        all_labels.append(np.asarray(labels)[keep])
    if all_boxes:
        boxes = np.concatenate(all_boxes)
        labels = np.concatenate(all_labels)
    else:
        boxes = np.zeros((0, 4))
        labels = np.zeros((0,), dtype=np.int64)
    return canvas, boxes, labels


def letterbox(image: np.ndarray, target: int, pad_value: int = 114
              ) -> tuple[np.ndarray, float, float, float]:
    """Aspect-preserving resize plus gray padding to a square target.

    Returns (image, scale, pad_x, pad_y); a source box maps to the
    network frame as box * scale + pad.
    """
    h, w = image.shape[:2]
    scale = min(target / h, target / w)
    nw, nh = int(round(w * scale)), int(round(h * scale))
    resized = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))
    out = np.full((target, target, 3), pad_value, dtype=np.uint8)
    pad_x, pad_y = (target - nw) // 2, (target - nh) // 2
    out[pad_y : pad_y + nh, pad_x : pad_x + nw] = resized
    return out, scale, float(pad_x), float(pad_y)


def letterbox_boxes(boxes: np.ndarray, scale: float, pad_x: float, pad_y: float
                    ) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).copy()
    if b.size:
        b[:, [0, 2]] = b[:, [0, 2]] * scale + pad_x
        b[:, [1, 3]] = b[:, [1, 3]] * scale + pad_y
    return b


def unletterbox_boxes(boxes: np.ndarray, scale: float, pad_x: float, pad_y: float
                      ) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).copy()
    if b.size:
        b[:, [0, 2]] = (b[:, [0, 2]] - pad_x) / scale
        b[:, [1, 3]] = (b[:, [1, 3]] - pad_y) / scale
    return b


class DetectionDataset:
    """Manifest-backed dataset yielding letterboxed tensors and targets."""

    def __init__(self, manifest_path, input_size: int, num_classes: int = 10,
                 use_mosaic: bool = False, seed: int = 0):
        self.root = os.path.dirname(os.path.abspath(manifest_path))
        self.input_size = input_size
        self.num_classes = num_classes
        self.use_mosaic = use_mosaic
        self.seed = seed
        with open(manifest_path) as f:
            self.entries = [
                tuple(line.strip().split("\t"))
                for line in f if line.strip()
            ]
        if not self.entries:
            raise ValueError(f"empty manifest {manifest_path}")

    def __len__(self) -> int:
        return len(self.entries)

    def _load_raw(self, idx: int):
        img_rel, ann_rel = self.entries[idx]
        img = np.asarray(Image.open(os.path.join(self.root, img_rel)).convert("RGB"))
        records, _ = parse_annotations(
            os.path.join(self.root, ann_rel), self.num_classes
        )
        # score-0 records mark ignored regions; excluded from training
        records = [r for r in records if r.score != 0]
        boxes = np.array([r.to_xyxy() for r in records], dtype=np.float64).reshape(-1, 4)
        labels = np.array([r.category for r in records], dtype=np.int64)
        return img, boxes, labels

    def __getitem__(self, idx: int):
        if self.use_mosaic:
            rng = np.random.default_rng(
                np.random.SeedSequence((self.seed, idx))
            )
            picks = [idx] + rng.integers(0, len(self), size=3).tolist()
            img, boxes, labels = mosaic(
                [self._load_raw(i) for i in picks], self.input_size, rng
            )
            scale, pad_x, pad_y = 1.0, 0.0, 0.0
            if img.shape[0] != self.input_size:
                img, scale, pad_x, pad_y = letterbox(img, self.input_size)
                boxes = letterbox_boxes(boxes, scale, pad_x, pad_y)
        else:
            img, boxes, labels = self._load_raw(idx)
            img, scale, pad_x, pad_y = letterbox(img, self.input_size)
            boxes = letterbox_boxes(boxes, scale, pad_x, pad_y)
        tensor = torch.from_numpy(img.astype(np.float32) / 255.0).permute(2, 0, 1)
        return tensor, torch.from_numpy(boxes.astype(np.float32)), torch.from_numpy(labels)
