"""Detector assembly: profiles, forward pass, post-processing, checkpoints.

A profile names a (width, depth, depthwise) triple applied to the base
backbone/head widths. The stride-4 pyramid level exists only in 4-head
configurations. Checkpoints are a single-file container: a plain-text
header (format version, config JSON, config digest, tensor manifest)
followed by little-endian float32 data in manifest order.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from fasterx.backbone import CSPDarknet, PYRAMID_STRIDES
from fasterx.blocks import ConvBlock
from fasterx.geometry import GridSpec, box_cxcywh_to_xyxy, decode, nms
from fasterx.heads import HEAD_MODES, HeadOutput, MultiLevelHead
from fasterx.neck import PAFPN, SlimFPN

CKPT_MAGIC = "FASTERXCKPT 1"

# profile -> (width multiplier, depth multiplier, depthwise backbone convs)
PROFILES = {
    "s": (0.50, 0.33, False),
    "tiny": (0.375, 0.33, False),
    "nano": (0.25, 0.33, True),
}

DEFAULT_INPUT_SIZE = {"s": 640, "tiny": 448, "nano": 448}

BASE_HEAD_WIDTH = 256
AUX_WIDTH_MULT = 1.25  # the largest family profile drives the auxiliary head


@dataclass
class DistillConfig:
    enabled: bool = False
    warmup_epochs: int = 50
    lam: float = 1.0
    aux_hidden: int = int(BASE_HEAD_WIDTH * AUX_WIDTH_MULT)


@dataclass
class ModelConfig:
    profile: str = "s"
    num_classes: int = 10
    input_size: int = 0  # 0 = profile default
    neck: str = "slimfpn"  # slimfpn | pafpn
    head: str = "ds+pixsf"  # plain | ds | pixsf | ds+pixsf
    num_heads: int = 4  # 3 or 4
    attention: bool = True
    unified_channels: int = 0  # 0 = stride-8 input width
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        if isinstance(self.distill, dict):
            self.distill = DistillConfig(**self.distill)
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.neck not in ("slimfpn", "pafpn"):
            raise ValueError(f"unknown neck {self.neck!r}")
        if self.head not in HEAD_MODES:
            raise ValueError(f"unknown head mode {self.head!r}")
        if self.num_heads not in (3, 4):
            raise ValueError("num_heads must be 3 or 4")
        if self.input_size == 0:
            self.input_size = DEFAULT_INPUT_SIZE[self.profile]
        if self.input_size % 64:
            raise ValueError("input_size must be divisible by 64")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def yolox_equivalent_config(profile: str = "s", num_classes: int = 10,
                            num_heads: int = 3, input_size: int = 0) -> ModelConfig:
    """Baseline configuration matching the reference one-stage detector."""
    head = "ds" if profile == "nano" else "plain"
    return ModelConfig(
        profile=profile, num_classes=num_classes, input_size=input_size,
        neck="pafpn", head=head, num_heads=num_heads, attention=False,
        distill=DistillConfig(enabled=False),
    )


def fasterx_config(profile: str = "s", num_classes: int = 10,
                   input_size: int = 0, distill: bool = False) -> ModelConfig:
    return ModelConfig(
        profile=profile, num_classes=num_classes, input_size=input_size,
        neck="slimfpn", head="ds+pixsf", num_heads=4, attention=True,
        distill=DistillConfig(enabled=distill),
    )


class FasterX(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        width, depth, depthwise = PROFILES[cfg.profile]
        self.backbone = CSPDarknet(width, depth, depthwise)

        channels = self.backbone.out_channels[: cfg.num_heads]
        self.strides = PYRAMID_STRIDES[: cfg.num_heads]
        neck_depth = max(1, round(3 * depth))
        if cfg.neck == "pafpn":
            self.neck = PAFPN(channels, depth=neck_depth, depthwise=depthwise)
            head_in = channels
        else:
            unified = cfg.unified_channels or None
            self.neck = SlimFPN(channels, unified, depth=neck_depth, depthwise=depthwise)
            head_in = (self.neck.unified_channels,) * cfg.num_heads

        hidden = int(BASE_HEAD_WIDTH * width)
        self.heads = MultiLevelHead(
            cfg.head, head_in, self.strides, hidden, cfg.num_classes,
            attention=cfg.attention,
        )

        if cfg.distill.enabled:
            self.aux_heads = MultiLevelHead(
                "plain", head_in, self.strides, cfg.distill.aux_hidden,
                cfg.num_classes, attention=False,
            )
            # training-only 1x1 projections from student stream features
            # to the auxiliary head's channel count
            self.distill_proj = nn.ModuleList(
                [ConvBlock(hidden, cfg.distill.aux_hidden, 1, 1, norm=False, act=False)
                 for _ in self.strides]
            )
        else:
            self.aux_heads = None
            self.distill_proj = None

    def forward_features(self, images: torch.Tensor):
        if images.shape[-1] != self.cfg.input_size or images.shape[-2] != self.cfg.input_size:
            raise ValueError(
                f"expected {self.cfg.input_size}^2 input, got {tuple(images.shape[-2:])}"
            )
        return self.neck(self.backbone(images)[: self.cfg.num_heads])

    def forward(self, images: torch.Tensor) -> list[HeadOutput]:
        return self.heads(self.forward_features(images))

    def forward_with_aux(self, images: torch.Tensor):
        if self.aux_heads is None:
            raise RuntimeError("model was built without auxiliary heads")
        feats = self.forward_features(images)
        return self.heads(feats), self.aux_heads(feats)

    @torch.no_grad()
    def predict(self, images: torch.Tensor, score_thr: float = 0.3,
                nms_thr: float = 0.45) -> list[dict]:
        """Decode, threshold on obj*cls score, and run class-wise NMS.

        Returns one dict per image: boxes (xyxy), scores, labels.
        """
        outputs = self.forward(images)
        results = []
        for b in range(images.shape[0]):
            flat = flatten_outputs(outputs, b)
            cls_p = torch.sigmoid(flat["cls_logits"])
            obj_p = torch.sigmoid(flat["obj_logits"])
            scores, labels = (cls_p * obj_p[:, None]).max(dim=1)
            keep = scores >= score_thr
            boxes = box_cxcywh_to_xyxy(flat["boxes_cxcywh"][keep])
            scores, labels = scores[keep], labels[keep]
            kept_idx = []
            for c in labels.unique().tolist():
                cmask = torch.nonzero(labels == c).flatten()
                kept = nms(boxes[cmask], scores[cmask], nms_thr)
                kept_idx.append(cmask[kept])
            if kept_idx:
                idx = torch.cat(kept_idx)
                idx = idx[torch.argsort(scores[idx], descending=True, stable=True)]
            else:
                idx = torch.zeros(0, dtype=torch.long)
            results.append(
                {"boxes": boxes[idx], "scores": scores[idx], "labels": labels[idx]}
            )
        return results


def build_model(cfg: ModelConfig, seed: int | None = None) -> FasterX:
    if seed is not None:
        torch.manual_seed(seed)
    return FasterX(cfg)


def flatten_outputs(outputs: list[HeadOutput], batch_idx: int) -> dict:
    """Flatten per-level head outputs of one image into candidate rows."""
    cls_rows, obj_rows, box_rows, centers, strides = [], [], [], [], []
    for out in outputs:
        g = out.grid
        cls_rows.append(
            out.cls_logits[batch_idx].permute(1, 2, 0).reshape(-1, out.cls_logits.shape[1])
        )
        obj_rows.append(out.obj_logits[batch_idx].reshape(-1))
        raw = out.reg[batch_idx].permute(1, 2, 0)
        box_rows.append(decode(raw, g).reshape(-1, 4))
        centers.append(
            g.cell_centers(device=out.cls_logits.device, dtype=out.cls_logits.dtype)
        )
        strides.append(out.cls_logits.new_full((g.num_cells,), float(g.stride)))
    return {
        "cls_logits": torch.cat(cls_rows),
        "obj_logits": torch.cat(obj_rows),
        "boxes_cxcywh": torch.cat(box_rows),
        "centers": torch.cat(centers),
        "strides": torch.cat(strides),
    }


class CheckpointError(RuntimeError):
    pass


def _state_tensors(model: FasterX):
    """Named float tensors in declaration order; integer step counters
    (unused by the fixed-momentum batch norm) are skipped."""
    for name, t in model.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        yield name, t


def save_checkpoint(model: FasterX, path, meta: dict | None = None) -> None:
    tensors = list(_state_tensors(model))
    with open(path, "wb") as f:
        header = [CKPT_MAGIC, model.cfg.to_json(), model.cfg.digest(),
                  json.dumps(meta or {}), str(len(tensors))]
        for name, t in tensors:
            header.append(f"{name} {','.join(str(s) for s in t.shape)}")
        header.append("DATA")
        f.write(("\n".join(header) + "\n").encode())
        for _, t in tensors:
            f.write(t.detach().to(torch.float32).contiguous().numpy().tobytes())


def load_checkpoint(path, expected_config: ModelConfig | None = None
                    ) -> tuple[FasterX, dict]:
    with open(path, "rb") as f:
        lines = []
        while True:
            line = f.readline()
            if not line:
                raise CheckpointError("truncated checkpoint header")
            text = line.decode().rstrip("\n")
            lines.append(text)
            if text == "DATA":
                break
        if lines[0] != CKPT_MAGIC:
            raise CheckpointError(f"unrecognized checkpoint format: {lines[0]!r}")
        cfg = ModelConfig.from_json(lines[1])
        if lines[2] != cfg.digest():
            raise CheckpointError("config digest mismatch (corrupt header)")
        if expected_config is not None and expected_config.digest() != cfg.digest():
            raise CheckpointError(
                f"checkpoint config {cfg.profile}/{cfg.neck}/{cfg.head} does not "
                f"match requested config {expected_config.profile}/"
                f"{expected_config.neck}/{expected_config.head}"
            )
        meta = json.loads(lines[3])
        n = int(lines[4])
        manifest = []
        for entry in lines[5 : 5 + n]:
            name, shape = entry.split(" ")
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            manifest.append((name, dims))

        model = build_model(cfg)
        state = dict(model.state_dict())
        for name, dims in manifest:
            if name not in state:
                raise CheckpointError(f"unknown tensor {name!r} in checkpoint")
            count = 1
            for d in dims:
                count *= d
            buf = f.read(count * 4)
            if len(buf) != count * 4:
                raise CheckpointError(f"truncated data for tensor {name!r}")
            t = torch.frombuffer(bytearray(buf), dtype=torch.float32).reshape(dims)
            state[name] = t
        model.load_state_dict(state, strict=False)
    return model, meta


def strip_aux(model: FasterX) -> FasterX:
    """Inference copy with all auxiliary machinery removed.

    Eval-mode outputs are identical to the full model's: the auxiliary
    heads and projections never participate in the student forward.
    """
    stripped_cfg = copy.deepcopy(model.cfg)
    stripped_cfg.distill.enabled = False
    stripped = FasterX(stripped_cfg)
    src = {
        k: v for k, v in model.state_dict().items()
        if not k.startswith(("aux_heads.", "distill_proj."))
    }
    stripped.load_state_dict(src)
    return stripped
