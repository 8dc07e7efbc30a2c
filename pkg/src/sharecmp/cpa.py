"""Class polarization-aware auxiliary head and loss.

The head turns fused stage features into per-class AoLP and DoLP maps; the
loss compares them with the scene AoLP/DoLP restricted to each class's pixels.
"""
from __future__ import annotations

from typing import Optional, Sequence

import torch
from torch import Tensor, nn

from .config import CPAConfig
from .decoder import IGNORE_INDEX, upsample
from .encoder import StageFeatures, init_weights
from .errors import InvalidInputError

# stage -> (a_hat, d_hat), each N x Cls x H x W
CPAEstimates = dict
# (a, d), each N x Cls x H x W
CPATargets = tuple


class CPAAHead(nn.Module):
    def __init__(self, in_dims: Sequence[int], num_classes: int, cfg: Optional[CPAConfig] = None, hidden: int = 64):
        super().__init__()
        self.cfg = cfg or CPAConfig()
        self.cfg.validate()
        self.in_dims = tuple(in_dims)
        self.num_classes = num_classes
        hidden = self.cfg.hidden_channels or hidden
        self.active_stages = tuple(sorted(self.cfg.active_stages))
        for s in self.active_stages:
            self.add_module(
                f"stage{s}",
                nn.ModuleDict(
                    {
                        "conv1": nn.Conv2d(self.in_dims[s - 1], hidden, 1),
                        "conv2": nn.Conv2d(hidden, 2 * num_classes, 1),
                    }
                ),
            )
        self.apply(init_weights)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.trunc_normal_(m.weight, std=0.02)

    def forward(self, feats: "StageFeatures | Sequence[Tensor]", out_size) -> CPAEstimates:
        fused = feats.fused if isinstance(feats, StageFeatures) else list(feats)
        stride4 = fused[0].shape[-2:]
        est = {}
        for s in self.active_stages:
            f = fused[s - 1]
            if f.shape[1] != self.in_dims[s - 1]:
                raise InvalidInputError(
                    f"stage {s} feature has {f.shape[1]} channels, expected {self.in_dims[s - 1]}"
                )
            head = getattr(self, f"stage{s}")
            x = upsample(head["conv1"](f), stride4)
            x = upsample(head["conv2"](x), out_size)
            est[s] = tuple(x.split(self.num_classes, dim=1))
        return est


def build_targets(aolp: Tensor, dolp: Tensor, mask: Tensor, num_classes: int) -> CPATargets:
    """Per-class target maps: scene AoLP/DoLP on the class's pixels, 0 elsewhere.

    ``aolp``/``dolp``/``mask`` are N x H x W (a trailing singleton channel is accepted).
    """
    if aolp.dim() == 4:
        aolp = aolp[:, 0]
    if dolp.dim() == 4:
        dolp = dolp[:, 0]
    if not (aolp.shape == dolp.shape == mask.shape):
        raise InvalidInputError(
            f"aolp {tuple(aolp.shape)}, dolp {tuple(dolp.shape)} and mask {tuple(mask.shape)} must align"
        )
    mask = mask.long()
    labeled = mask != IGNORE_INDEX
    if bool((mask[labeled] >= num_classes).any()) or bool((mask < 0).any()):
        raise InvalidInputError(f"mask holds class ids outside [0, {num_classes})")
    classes = torch.arange(num_classes, device=mask.device).view(1, -1, 1, 1)
    onehot = (mask.unsqueeze(1) == classes).to(aolp.dtype)
    return aolp.unsqueeze(1) * onehot, dolp.unsqueeze(1) * onehot


def cpa_loss(est: CPAEstimates, tgt: CPATargets, cfg: Optional[CPAConfig] = None) -> Tensor:
    """lambda * sum over stages and classes of the squared AoLP and DoLP errors.

    Pixels are averaged (``reduction="mean"``) or summed (``"sum"``) per class map.
    """
    cfg = cfg or CPAConfig()
    a, d = tgt
    total = a.new_zeros(())
    for s in sorted(est):
        a_hat, d_hat = est[s]
        if a_hat.shape != a.shape or d_hat.shape != d.shape:
            raise InvalidInputError(f"stage {s} estimates {tuple(a_hat.shape)} do not match targets {tuple(a.shape)}")
        sq = (a - a_hat) ** 2 + (d - d_hat) ** 2
        # sum over classes, reduce over batch and pixels
        per_class = sq.sum(dim=(0, 2, 3))
        if cfg.reduction == "mean":
            per_class = per_class / (sq.shape[0] * sq.shape[2] * sq.shape[3])
        total = total + per_class.sum()
    return cfg.loss_weight * total
