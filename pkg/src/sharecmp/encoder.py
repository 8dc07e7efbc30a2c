"""Shared dual-branch four-stage encoder.

Each stage tokenizes both inputs with an overlapping strided convolution
(OPEmbed), runs the tokens through efficient self-attention + Mix-FFN blocks
whose weights are shared between the RGB and polarization branches, then
cross-rectifies and fuses the two branch maps into one stage feature.

Parameter names follow ``stage{i}.{rgb|p|shared|fuse}.{block}.{param}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import STAGES, EncoderConfig
from .errors import InvalidInputError

BRANCHES = ("rgb", "p")


def init_weights(module: nn.Module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Conv2d):
        fan_out = module.kernel_size[0] * module.kernel_size[1] * module.out_channels // module.groups
        nn.init.normal_(module.weight, 0.0, math.sqrt(2.0 / fan_out))
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def tokens_to_map(x: Tensor, h: int, w: int) -> Tensor:
    b, _, c = x.shape
    return x.transpose(1, 2).reshape(b, c, h, w)


def map_to_tokens(x: Tensor) -> Tensor:
    return x.flatten(2).transpose(1, 2)


class OverlapPatchEmbed(nn.Module):
    def __init__(self, in_channels: int, dim: int, patch_size: int, stride: int):
        super().__init__()
        self.in_channels = in_channels
        self.proj = nn.Conv2d(in_channels, dim, patch_size, stride, padding=patch_size // 2)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: Tensor) -> tuple[Tensor, int, int]:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise InvalidInputError(
                f"patch embedding expects N x {self.in_channels} x H x W, got {tuple(x.shape)}"
            )
        x = self.proj(x)
        h, w = x.shape[-2:]
        return self.norm(map_to_tokens(x)), h, w


class EfficientSelfAttention(nn.Module):
    """Multi-head attention whose keys/values come from a spatially reduced map."""

    def __init__(self, dim: int, heads: int, sr_ratio: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, sr_ratio, sr_ratio)
            self.norm = nn.LayerNorm(dim)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        b, n, c = x.shape
        hd = c // self.heads
        q = self.q(x).reshape(b, n, self.heads, hd).transpose(1, 2)
        if self.sr_ratio > 1:
            x = self.norm(map_to_tokens(self.sr(tokens_to_map(x, h, w))))
        k, v = self.kv(x).reshape(b, -1, 2, self.heads, hd).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class MixFFN(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, 1, 1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        x = self.fc1(x)
        x = map_to_tokens(self.dwconv(tokens_to_map(x, h, w)))
        return self.fc2(F.gelu(x))


class TrunkBlock(nn.Module):
    def __init__(self, dim: int, heads: int, sr_ratio: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EfficientSelfAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MixFFN(dim, dim * mlp_ratio)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.mlp(self.norm2(x), h, w)


class EncoderBranch(nn.Module):
    """Container for the parameters one stage owns for a branch (or shares)."""

    def __init__(self, cfg: EncoderConfig, stage: int, with_patch: bool, with_trunk: bool):
        super().__init__()
        i = stage - 1
        in_ch = cfg.in_channels if i == 0 else cfg.dims[i - 1]
        self.depth = cfg.depths[i] if with_trunk else 0
        if with_patch:
            self.patch_embed = OverlapPatchEmbed(in_ch, cfg.dims[i], cfg.patch_sizes[i], cfg.strides[i])
        for j in range(self.depth):
            self.add_module(
                f"block{j}", TrunkBlock(cfg.dims[i], cfg.heads[i], cfg.sr_ratios[i], cfg.mlp_ratio)
            )
        if with_trunk:
            self.norm = nn.LayerNorm(cfg.dims[i])

    def blocks(self) -> list[TrunkBlock]:
        return [getattr(self, f"block{j}") for j in range(self.depth)]


class FeatureRectify(nn.Module):
    """Cross-modal channel and spatial gates; each branch takes a gated residual of the other."""

    def __init__(self, dim: int, reduction: int = 1):
        super().__init__()
        hidden = 4 * dim // reduction
        self.channel_mlp = nn.Sequential(
            nn.Linear(4 * dim, hidden), nn.ReLU(), nn.Linear(hidden, 2 * dim)
        )
        self.spatial_mlp = nn.Sequential(
            nn.Conv2d(2 * dim, dim // reduction, 1), nn.ReLU(), nn.Conv2d(dim // reduction, 2, 1)
        )
        # zero gains make the module start as the identity
        self.rgb_gain = nn.Parameter(torch.zeros(dim))
        self.p_gain = nn.Parameter(torch.zeros(dim))

    def gates(self, y_rgb: Tensor, y_p: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        pooled = torch.cat(
            [y_rgb.mean((2, 3)), y_rgb.amax((2, 3)), y_p.mean((2, 3)), y_p.amax((2, 3))], dim=1
        )
        ch_rgb, ch_p = torch.sigmoid(self.channel_mlp(pooled)).chunk(2, dim=1)
        sp_rgb, sp_p = torch.sigmoid(self.spatial_mlp(torch.cat([y_rgb, y_p], 1))).chunk(2, dim=1)
        return ch_rgb[..., None, None], ch_p[..., None, None], sp_rgb, sp_p

    def forward(self, y_rgb: Tensor, y_p: Tensor) -> tuple[Tensor, Tensor]:
        ch_rgb, ch_p, sp_rgb, sp_p = self.gates(y_rgb, y_p)
        out_rgb = y_rgb + self.rgb_gain[:, None, None] * (ch_p + sp_p) * y_p
        out_p = y_p + self.p_gain[:, None, None] * (ch_rgb + sp_rgb) * y_rgb
        return out_rgb, out_p


class CrossAttention(nn.Module):
    """Each branch queries a (head_dim x head_dim) global context built from the other."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.kv_rgb = nn.Linear(dim, 2 * dim, bias=False)
        self.kv_p = nn.Linear(dim, 2 * dim, bias=False)

    def _context(self, x: Tensor, kv: nn.Linear) -> tuple[Tensor, Tensor]:
        b, n, c = x.shape
        hd = c // self.heads
        q = x.reshape(b, n, self.heads, hd).transpose(1, 2)
        k, v = kv(x).reshape(b, n, 2, self.heads, hd).permute(2, 0, 3, 1, 4)
        ctx = (k.transpose(-2, -1) @ v * self.scale).softmax(dim=-2)
        return q, ctx

    def forward(self, u_rgb: Tensor, u_p: Tensor) -> tuple[Tensor, Tensor]:
        b, n, c = u_rgb.shape
        q_rgb, ctx_rgb = self._context(u_rgb, self.kv_rgb)
        q_p, ctx_p = self._context(u_p, self.kv_p)
        v_rgb = (q_rgb @ ctx_p).transpose(1, 2).reshape(b, n, c)
        v_p = (q_p @ ctx_rgb).transpose(1, 2).reshape(b, n, c)
        return v_rgb, v_p


class FeatureFusion(nn.Module):
    def __init__(self, dim: int, heads: int, reduction: int = 1):
        super().__init__()
        self.proj_rgb = nn.Linear(dim, 2 * dim)
        self.proj_p = nn.Linear(dim, 2 * dim)
        self.cross = CrossAttention(dim, heads)
        self.end_rgb = nn.Linear(2 * dim, dim)
        self.end_p = nn.Linear(2 * dim, dim)
        self.norm_rgb = nn.LayerNorm(dim)
        self.norm_p = nn.LayerNorm(dim)
        hidden = dim // reduction
        self.merge = nn.Conv2d(2 * dim, dim, 1)
        self.embed_in = nn.Conv2d(2 * dim, hidden, 1)
        self.embed_dw = nn.Conv2d(hidden, hidden, 3, 1, 1, groups=hidden)
        self.embed_out = nn.Conv2d(hidden, dim, 1)
        self.norm = nn.LayerNorm(dim)

    def forward(self, y_rgb: Tensor, y_p: Tensor) -> Tensor:
        h, w = y_rgb.shape[-2:]
        t_rgb, t_p = map_to_tokens(y_rgb), map_to_tokens(y_p)
        a_rgb, u_rgb = F.relu(self.proj_rgb(t_rgb)).chunk(2, dim=-1)
        a_p, u_p = F.relu(self.proj_p(t_p)).chunk(2, dim=-1)
        v_rgb, v_p = self.cross(u_rgb, u_p)
        t_rgb = self.norm_rgb(t_rgb + self.end_rgb(torch.cat([a_rgb, v_rgb], dim=-1)))
        t_p = self.norm_p(t_p + self.end_p(torch.cat([a_p, v_p], dim=-1)))
        cat = torch.cat([tokens_to_map(t_rgb, h, w), tokens_to_map(t_p, h, w)], dim=1)
        fused = self.merge(cat) + self.embed_out(F.relu(self.embed_dw(self.embed_in(cat))))
        return tokens_to_map(self.norm(map_to_tokens(fused)), h, w)


class RectifyFuse(nn.Module):
    def __init__(self, dim: int, heads: int, reduction: int = 1):
        super().__init__()
        self.frm = FeatureRectify(dim, reduction)
        self.ffm = FeatureFusion(dim, heads, reduction)

    def forward(self, y_rgb: Tensor, y_p: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        if y_rgb.shape != y_p.shape:
            raise InvalidInputError(
                f"branch features disagree in shape: {tuple(y_rgb.shape)} vs {tuple(y_p.shape)}"
            )
        r_rgb, r_p = self.frm(y_rgb, y_p)
        return r_rgb, r_p, self.ffm(r_rgb, r_p)


class EncoderStage(nn.Module):
    def __init__(self, cfg: EncoderConfig, stage: int):
        super().__init__()
        self.stage = stage
        me = stage in cfg.me_opembed_stages
        if cfg.share_trunk:
            self.shared = EncoderBranch(cfg, stage, with_patch=not me, with_trunk=True)
            if me:
                self.rgb = EncoderBranch(cfg, stage, with_patch=True, with_trunk=False)
                self.p = EncoderBranch(cfg, stage, with_patch=True, with_trunk=False)
        else:
            self.rgb = EncoderBranch(cfg, stage, with_patch=True, with_trunk=True)
            self.p = EncoderBranch(cfg, stage, with_patch=True, with_trunk=True)
        i = stage - 1
        self.fuse = RectifyFuse(cfg.dims[i], cfg.heads[i], cfg.fusion_reduction)

    def _owner(self, branch: str, part: str) -> EncoderBranch:
        if branch not in BRANCHES:
            raise InvalidInputError(f"unknown branch {branch!r}")
        own = getattr(self, branch, None)
        if own is not None and (part == "patch" and hasattr(own, "patch_embed") or part == "trunk" and own.depth):
            return own
        return self.shared

    def patch_embed(self, branch: str) -> OverlapPatchEmbed:
        return self._owner(branch, "patch").patch_embed

    def opembed(self, x: Tensor, branch: str) -> tuple[Tensor, int, int]:
        return self.patch_embed(branch)(x)

    def trunk(self, tokens: Tensor, h: int, w: int, branch: str) -> Tensor:
        owner = self._owner(branch, "trunk")
        for blk in owner.blocks():
            tokens = blk(tokens, h, w)
        return tokens_to_map(owner.norm(tokens), h, w)

    def forward_branch(self, x: Tensor, branch: str) -> Tensor:
        tokens, h, w = self.opembed(x, branch)
        return self.trunk(tokens, h, w, branch)

    def forward(self, x_rgb: Tensor, x_p: Tensor):
        y_rgb = self.forward_branch(x_rgb, "rgb")
        y_p = self.forward_branch(x_p, "p")
        r_rgb, r_p, fused = self.fuse(y_rgb, y_p)
        return y_rgb, y_p, r_rgb, r_p, fused


@dataclass
class StageFeatures:
    """Fused maps f1..f4 (N x C x H x W) plus per-branch maps before fusion."""

    fused: list[Tensor]
    rgb: list[Tensor]
    p: list[Tensor]

    def __getitem__(self, stage: int) -> Tensor:
        return self.fused[stage - 1]


class ShareEncoder(nn.Module):
    MIN_SIZE = 32

    def __init__(self, cfg: Optional[EncoderConfig] = None):
        super().__init__()
        self.cfg = cfg or EncoderConfig()
        self.cfg.validate()
        for s in STAGES:
            self.add_module(f"stage{s}", EncoderStage(self.cfg, s))
        self.apply(init_weights)

    def stages(self) -> list[EncoderStage]:
        return [getattr(self, f"stage{s}") for s in STAGES]

    def forward(self, x_rgb: Tensor, x_p: Tensor) -> StageFeatures:
        for name, x in (("x_rgb", x_rgb), ("x_p", x_p)):
            if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
                raise InvalidInputError(f"{name} must be N x {self.cfg.in_channels} x H x W")
            if min(x.shape[-2:]) < self.MIN_SIZE:
                raise InvalidInputError(f"{name} spatial size must be >= {self.MIN_SIZE}")
        if x_rgb.shape != x_p.shape:
            raise InvalidInputError("x_rgb and x_p disagree in shape")
        feats = StageFeatures([], [], [])
        for stage in self.stages():
            y_rgb, y_p, x_rgb, x_p, fused = stage(x_rgb, x_p)
            feats.rgb.append(y_rgb)
            feats.p.append(y_p)
            feats.fused.append(fused)
        return feats
