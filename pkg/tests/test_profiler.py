import torch
import torch.nn as nn

from fasterx.model import DistillConfig, ModelConfig, build_model
from fasterx.profiler import (
    CostReport,
    count_flops,
    count_flops_and_breakdown,
    count_params,
    profile_model,
    time_forward,
)


def test_conv_flops_hand_count():
    # 1x1 conv 16->32 on a 10x10 map: 2 * 1*1*16*32*100 = 102,400 units
    m = nn.Conv2d(16, 32, 1, bias=False)
    breakdown = count_flops_and_breakdown(_Wrap(m, 10, 16), 10)
    total = sum(fl for _, fl in breakdown.values())
    assert total == 2 * 16 * 32 * 100


class _Wrap(nn.Module):
    def __init__(self, inner, size, cin):
        super().__init__()
        self.inner = inner
        self.size = size
        self.cin = cin

    def forward(self, x):
        return self.inner(torch.zeros(x.shape[0], self.cin, self.size, self.size))


def test_conv_flops_grouped_and_biased():
    # depthwise 3x3 on 8 channels, 4x4 out, with bias:
    # 2 * 9 * 1 * 8 * 16 + 8*16 = 2304 + 128
    m = nn.Conv2d(8, 8, 3, padding=1, groups=8, bias=True)
    breakdown = count_flops_and_breakdown(_Wrap(m, 4, 8), 4)
    assert sum(fl for _, fl in breakdown.values()) == 2 * 9 * 8 * 16 + 128


def test_param_count_matches_torch():
    model = build_model(ModelConfig(profile="nano", num_classes=4, input_size=128), seed=0)
    assert count_params(model) == sum(p.numel() for p in model.parameters())


def test_param_count_excludes_aux_by_default():
    cfg = ModelConfig(
        profile="nano", num_classes=4, input_size=128,
        distill=DistillConfig(enabled=True, aux_hidden=32),
    )
    model = build_model(cfg, seed=0)
    without = count_params(model)
    with_aux = count_params(model, include_aux=True)
    assert with_aux == sum(p.numel() for p in model.parameters())
    assert without < with_aux

    plain = build_model(
        ModelConfig(profile="nano", num_classes=4, input_size=128), seed=0
    )
    assert without == count_params(plain)


def test_aux_branch_free_in_flops():
    cfg = ModelConfig(
        profile="nano", num_classes=4, input_size=128,
        distill=DistillConfig(enabled=True, aux_hidden=32),
    )
    model = build_model(cfg, seed=0)
    plain = build_model(
        ModelConfig(profile="nano", num_classes=4, input_size=128), seed=0
    )
    assert count_flops(model, 128) == count_flops(plain, 128)


def test_profile_report_consistency():
    model = build_model(ModelConfig(profile="nano", num_classes=4, input_size=128), seed=0)
    report = profile_model(model)
    assert isinstance(report, CostReport)
    assert report.input_size == 128
    assert report.params == sum(p for p, _ in report.breakdown.values())
    assert report.flop_units == sum(fl for _, fl in report.breakdown.values())
    assert report.params == count_params(model)
    text = report.to_text()
    assert "TOTAL" in text and f"{report.params}" in text
    machine = report.to_machine_lines()
    assert f"total params={report.params} flops={report.flop_units}" in machine


def test_flops_scale_quadratically_with_input():
    f1 = count_flops(
        build_model(ModelConfig(profile="nano", num_classes=4, input_size=128), seed=0), 128
    )
    f2 = count_flops(
        build_model(ModelConfig(profile="nano", num_classes=4, input_size=256), seed=0), 256
    )
    assert 3.5 < f2 / f1 < 4.5


def test_time_forward_statistics():
    model = build_model(ModelConfig(profile="nano", num_classes=4, input_size=128), seed=0)
    stats = time_forward(model, reps=3, warmup=1)
    assert set(stats) >= {"mean", "p50", "p95"}
    assert stats["mean"] > 0
    assert stats["p95"] >= stats["p50"]
