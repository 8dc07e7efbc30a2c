"""Structural parameter accounting against a non-shared dual-branch baseline."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import nn

from .config import ModelConfig
from .model import ShareCMP


def count(module: Optional[nn.Module], prefix: str = "") -> int:
    if module is None:
        return 0
    return sum(p.numel() for n, p in module.named_parameters() if n.startswith(prefix))


def _count_where(module: nn.Module, pred) -> int:
    return sum(p.numel() for n, p in module.named_parameters() if pred(n))


@dataclass
class ParamReport:
    modules: dict[str, int]
    encoder_parts: dict[str, int]
    total: int
    total_training: int
    baseline: dict[str, int]
    ratios: dict[str, float]
    flops: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cfg: ModelConfig) -> ShareCMP:
    # meta tensors: structure only, no storage, no init cost
    with torch.device("meta"):
        return ShareCMP(cfg)


def estimate_flops(cfg: ModelConfig, size=(512, 512)) -> dict[str, float]:
    """Analytic FLOP estimate of one inference forward (informational only)."""
    from torch.utils.flop_counter import FlopCounterMode

    model = _build(cfg).eval()
    c = cfg.pga.in_channels_per_angle
    with torch.device("meta"):
        rgb = torch.empty(1, 3, *size)
        angles = torch.empty(1, 4 * c, *size)
        reps = torch.empty(1, 3, *size)
    counter = FlopCounterMode(display=False)
    with counter, torch.no_grad():
        model(rgb, angles, reps, with_cpa=False)
    per_module = counter.get_flop_counts()
    total = counter.get_total_flops()
    out = {"total": float(total), "total_macs": float(total) / 2}
    for name in ("pga", "encoder", "decoder"):
        key = next((k for k in per_module if k.split(".")[-1] == name or k.endswith(f".{name}")), None)
        if key is not None:
            out[name] = float(sum(per_module[key].values()))
    return out


def count_params(cfg: Optional[ModelConfig] = None, flops: bool = False, flops_size=(512, 512)) -> ParamReport:
    """Count parameters of the configured model and of its non-shared dual baseline.

    The baseline duplicates the full encoder trunk per branch, keeps the same
    rectify/fuse modules and decoder, and takes a fixed representation as its
    polarization input (no PGA, no auxiliary head).
    """
    cfg = (cfg or ModelConfig()).validate()
    model = _build(cfg)
    dual_cfg = dataclasses.replace(cfg, encoder=dataclasses.replace(cfg.encoder, share_trunk=False))
    dual = _build(dual_cfg)

    modules = {
        "pga": count(model.pga),
        "encoder": count(model.encoder),
        "decoder": count(model.decoder),
        "cpaahead": count(model.cpaahead),
    }
    enc = model.encoder
    fusion = _count_where(enc, lambda n: ".fuse." in n)
    if cfg.encoder.share_trunk:
        extra_opembed = _count_where(enc, lambda n: ".p.patch_embed." in n)
    else:
        extra_opembed = _count_where(enc, lambda n: ".p." in n)
    single_trunk = _count_where(dual.encoder, lambda n: ".rgb." in n)
    encoder_parts = {
        "single_trunk": single_trunk,
        "extra_branch_params": extra_opembed,
        "fusion": fusion,
    }
    total = modules["pga"] + modules["encoder"] + modules["decoder"]
    baseline = {
        "encoder": count(dual.encoder),
        "decoder": count(dual.decoder),
    }
    baseline["total"] = baseline["encoder"] + baseline["decoder"]
    ratios = {
        "encoder_shared_over_dual": modules["encoder"] / baseline["encoder"],
        "total_shared_over_dual": total / baseline["total"],
        "total_reduction": 1.0 - total / baseline["total"],
    }
    report = ParamReport(
        modules=modules,
        encoder_parts=encoder_parts,
        total=total,
        total_training=total + modules["cpaahead"],
        baseline=baseline,
        ratios=ratios,
    )
    if flops:
        report.flops = estimate_flops(cfg, flops_size)
    return report


def format_report(report: ParamReport) -> str:
    m = 1e6
    lines = [
        f"{'Structure':<28}{'#Params(M)':>12}",
        f"{'Dual baseline':<28}{report.baseline['total'] / m:>12.2f}",
        f"{'  - Encoder':<28}{report.baseline['encoder'] / m:>12.2f}",
        f"{'Shared model':<28}{report.total / m:>12.2f}",
        f"{'  - Encoder':<28}{report.modules['encoder'] / m:>12.2f}",
        f"{'    - single trunk':<28}{report.encoder_parts['single_trunk'] / m:>12.2f}",
        f"{'    - extra branch params':<28}{report.encoder_parts['extra_branch_params'] / m:>12.2f}",
        f"{'    - rectify/fuse':<28}{report.encoder_parts['fusion'] / m:>12.2f}",
        f"{'  - PGA':<28}{report.modules['pga'] / m:>12.2f}",
        f"{'  - Decoder':<28}{report.modules['decoder'] / m:>12.2f}",
        f"{'CPA head (training only)':<28}{report.modules['cpaahead'] / m:>12.2f}",
        "",
        f"encoder shared/dual: {report.ratios['encoder_shared_over_dual']:.4f}",
        f"total reduction:     {report.ratios['total_reduction']:.4f}",
    ]
    if report.flops:
        lines.append(
            f"FLOPs (G, estimate): {report.flops['total'] / 1e9:.2f} "
            f"({report.flops['total_macs'] / 1e9:.2f} GMACs)"
        )
    return "\n".join(lines)
