"""Polarization Generate Attention: learn a 3-channel polarization image from four angle images."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .config import PGAConfig
from .encoder import init_weights
from .errors import ConfigError, InvalidInputError
from .polarization import PolarizedImageSet

ANGLE_NAMES = ("conv0", "conv45", "conv90", "conv135")


class DWConv(nn.Sequential):
    """1x1 channel mixing followed by a grouped (optionally dilated) 3x3 convolution."""

    def __init__(self, in_ch: int, out_ch: int, groups: int, dilation: int = 1):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 1),
            nn.Conv2d(out_ch, out_ch, 3, padding=dilation, dilation=dilation, groups=groups),
        )


class ChannelAttention(nn.Module):
    """Squeeze-excitation gate: global average pool -> bottleneck MLP -> sigmoid."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(channels, max(1, channels // reduction))
        self.fc2 = nn.Linear(max(1, channels // reduction), channels)

    def gate(self, pooled: Tensor) -> Tensor:
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(pooled))))

    def forward(self, x: Tensor) -> Tensor:
        return self.gate(x.mean(dim=(2, 3)))[..., None, None]


@dataclass
class PGAFeatures:
    f_p: Tensor
    attn_p: Tensor


class PGA(nn.Module):
    def __init__(self, cfg: Optional[PGAConfig] = None):
        super().__init__()
        self.cfg = cfg or PGAConfig()
        self.cfg.validate()
        c_in, mid = self.cfg.in_channels_per_angle, self.cfg.mid_channels
        cat = 4 * mid
        for name in ANGLE_NAMES:
            self.add_module(name, nn.Conv2d(c_in, mid, 3, padding=1))
        self.attn_dw = DWConv(cat, cat, self.cfg.groups, self.cfg.dilation)
        self.channel_attn = ChannelAttention(cat)
        # 1x1 down to the output channels, then a depthwise 3x3
        self.ffn = DWConv(cat, self.cfg.out_channels, groups=self.cfg.out_channels)
        self.act = nn.PReLU(self.cfg.out_channels if self.cfg.prelu_per_channel else 1)
        self.apply(init_weights)

    @property
    def in_channels(self) -> int:
        return 4 * self.cfg.in_channels_per_angle

    def concat(self, angles: Tensor) -> Tensor:
        """Per-angle 3x3 convolutions, concatenated in 0/45/90/135 order."""
        if angles.dim() != 4 or angles.shape[1] != self.in_channels:
            raise InvalidInputError(
                f"PGA expects N x {self.in_channels} x H x W angle stack, got {tuple(angles.shape)}"
            )
        chunks = angles.chunk(4, dim=1)
        return torch.cat([getattr(self, n)(x) for n, x in zip(ANGLE_NAMES, chunks)], dim=1)

    def attention(self, f_p: Tensor) -> Tensor:
        return self.channel_attn(self.attn_dw(f_p))

    def features(self, angles: Tensor) -> PGAFeatures:
        f_p = self.concat(angles)
        return PGAFeatures(f_p, self.attention(f_p))

    def generate(self, angles: Tensor) -> Tensor:
        feats = self.features(angles)
        return self.act(self.ffn(feats.f_p + feats.attn_p * feats.f_p))

    def forward(self, angles: Optional[Tensor] = None, representations: Optional[Tensor] = None) -> Tensor:
        if self.cfg.bypass:
            if representations is None:
                raise ConfigError("PGA bypass requested but no representations were provided")
            return stack_representations(representations)
        if angles is None:
            raise InvalidInputError("PGA needs the four-angle image stack")
        return self.generate(angles)


def stack_representations(reps: "Tensor | Sequence[Tensor]") -> Tensor:
    """Concatenate representation maps along channels into an N x 3 x H x W tensor."""
    x = reps if isinstance(reps, Tensor) else torch.cat(list(reps), dim=1)
    if x.shape[1] == 1:
        x = x.repeat(1, 3, 1, 1)
    if x.shape[1] != 3:
        raise ConfigError(f"bypass representations must stack to 3 channels, got {x.shape[1]}")
    return x


def angles_to_tensor(p: PolarizedImageSet, dtype=torch.float32) -> Tensor:
    """PolarizedImageSet (H x W x C each) -> 1 x 4C x H x W tensor in angle order."""
    arr = p.stack()
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype)[None]


def pga_concat(p: PolarizedImageSet, module: PGA) -> Tensor:
    return module.concat(angles_to_tensor(p, next(module.parameters()).dtype))


def pga_forward(p: PolarizedImageSet, module: PGA) -> Tensor:
    return module.generate(angles_to_tensor(p, next(module.parameters()).dtype))
