"""Analytic parameter / FLOP accounting and a wall-clock timing harness.

FLOP convention: one multiply-accumulate = TWO units (multiply + add),
so a conv costs 2 * k^2 * Cin / groups * Cout * Hout * Wout units. This
is the YOLO-family reporting convention (the S baseline at 640^2 comes
out at 26.8 GFLOPs under it); conventions differ by 2x across tools, so
this is pinned here deliberately. Norm, activation and pooling layers
are charged one unit per output element (well under 1% of any total);
pure rearrangements (focus, pixel shuffle, concat, interpolation) are
free. Auxiliary training heads are excluded unless explicitly included:
the profiler sees the inference graph.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import torch
import torch.nn as nn

def _is_aux(name: str) -> bool:
    return name.startswith(("aux_heads", "distill_proj"))


@dataclass
class CostReport:
    params: int
    flop_units: int
    input_size: int
    breakdown: dict = field(default_factory=dict)  # leaf path -> (params, flops)

    def to_text(self) -> str:
        lines = [f"{'module':<60} {'params':>12} {'flops':>16}"]
        for path, (p, fl) in sorted(self.breakdown.items()):
            lines.append(f"{path:<60} {p:>12} {fl:>16}")
        lines.append(
            f"{'TOTAL':<60} {self.params:>12} {self.flop_units:>16}"
            f"  ({self.params / 1e6:.2f}M params, "
            f"{self.flop_units / 1e9:.2f} GFLOPs @ {self.input_size})"
        )
        return "\n".join(lines)

    def to_machine_lines(self) -> str:
        lines = [
            f"module={path} params={p} flops={fl}"
            for path, (p, fl) in sorted(self.breakdown.items())
        ]
        lines.append(
            f"total params={self.params} flops={self.flop_units} input={self.input_size}"
        )
        return "\n".join(lines)


def count_params(model: nn.Module, include_aux: bool = False) -> int:
    """Exact count of trainable scalars, auxiliary branch excluded by default."""
    return sum(
        p.numel()
        for name, p in model.named_parameters()
        if p.requires_grad and (include_aux or not _is_aux(name))
    )


def _leaf_flops(module: nn.Module, out: torch.Tensor) -> int:
    if isinstance(module, nn.Conv2d):
        kh, kw = module.kernel_size
        cin = module.in_channels // module.groups
        macs = kh * kw * cin * module.out_channels * out.shape[-2] * out.shape[-1]
        units = 2 * macs
        if module.bias is not None:
            units += module.out_channels * out.shape[-2] * out.shape[-1]
        return units * out.shape[0]
    if isinstance(module, (nn.BatchNorm2d, nn.SiLU, nn.ReLU, nn.Sigmoid, nn.MaxPool2d)):
        return out.numel()
    return 0


def count_flops_and_breakdown(model: nn.Module, input_size: int,
                              include_aux: bool = False) -> dict:
    """Per-leaf (params, flops) for one forward at the given square input."""
    breakdown: dict[str, list[int]] = {}
    hooks = []

    def make_hook(name):
        def hook(module, inputs, output):
            if not torch.is_tensor(output):
                return
            entry = breakdown.setdefault(name, [0, 0])
            entry[1] += _leaf_flops(module, output)
        return hook

    for name, module in model.named_modules():
        if len(list(module.children())):
            continue
        if not include_aux and _is_aux(name):
            continue
        hooks.append(module.register_forward_hook(make_hook(name)))

    was_training = model.training
    model.eval()
    with torch.no_grad():
        dummy = torch.zeros(1, 3, input_size, input_size)
        model(dummy)
    for h in hooks:
        h.remove()
    if was_training:
        model.train()

    for name, module in model.named_modules():
        if len(list(module.children())):
            continue
        if not include_aux and _is_aux(name):
            continue
        p = sum(q.numel() for q in module.parameters(recurse=False) if q.requires_grad)
        if p or name in breakdown:
            entry = breakdown.setdefault(name, [0, 0])
            entry[0] += p
    return {k: tuple(v) for k, v in breakdown.items()}


def count_flops(model: nn.Module, input_size: int, include_aux: bool = False) -> int:
    breakdown = count_flops_and_breakdown(model, input_size, include_aux)
    return sum(fl for _, fl in breakdown.values())


def profile_model(model: nn.Module, input_size: int | None = None) -> CostReport:
    size = input_size or model.cfg.input_size
    breakdown = count_flops_and_breakdown(model, size)
    return CostReport(
        params=sum(p for p, _ in breakdown.values()),
        flop_units=sum(fl for _, fl in breakdown.values()),
        input_size=size,
        breakdown=breakdown,
    )


def time_forward(model: nn.Module, input_size: int | None = None,
                 reps: int = 10, warmup: int = 2, batch: int = 1) -> dict:
    """Wall-clock per-image forward latency: mean / p50 / p95 over reps."""
    size = input_size or model.cfg.input_size
    was_training = model.training
    model.eval()
    x = torch.zeros(batch, 3, size, size)
    with torch.no_grad():
        for _ in range(warmup):
            model(x)
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            model(x)
            samples.append((time.perf_counter() - t0) / batch)
    if was_training:
        model.train()
    samples.sort()
    return {
        "mean": statistics.fmean(samples),
        "p50": samples[len(samples) // 2],
        "p95": samples[min(len(samples) - 1, int(0.95 * len(samples)))],
        "reps": reps,
    }
