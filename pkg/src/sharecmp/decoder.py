"""All-MLP segmentation decoder and the cross-entropy segmentation loss."""
from __future__ import annotations

import warnings
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import DecoderConfig
from .encoder import StageFeatures, init_weights
from .errors import InvalidInputError

IGNORE_INDEX = 255


def upsample(x: Tensor, size) -> Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class MLPDecoder(nn.Module):
    def __init__(self, in_dims: Sequence[int], cfg: Optional[DecoderConfig] = None):
        super().__init__()
        self.cfg = cfg or DecoderConfig()
        self.cfg.validate()
        self.in_dims = tuple(in_dims)
        e = self.cfg.embed_dim
        for i, d in enumerate(self.in_dims, start=1):
            self.add_module(f"proj{i}", nn.Conv2d(d, e, 1))
        self.fuse = nn.Conv2d(len(self.in_dims) * e, e, 1, bias=False)
        self.bn = nn.BatchNorm2d(e)
        self.dropout = nn.Dropout2d(self.cfg.dropout)
        self.classifier = nn.Conv2d(e, self.cfg.num_classes, 1)
        self.apply(init_weights)
        nn.init.normal_(self.classifier.weight, 0.0, 0.01)

    def forward(self, feats: "StageFeatures | Sequence[Tensor]", out_size=None) -> Tensor:
        """Logits at stride 4, or at ``out_size`` when given."""
        fused = feats.fused if isinstance(feats, StageFeatures) else list(feats)
        if len(fused) != len(self.in_dims) or any(f is None for f in fused):
            raise InvalidInputError(f"decoder needs {len(self.in_dims)} stage features")
        size = fused[0].shape[-2:]
        outs = []
        for i, f in enumerate(fused, start=1):
            if f.shape[1] != self.in_dims[i - 1]:
                raise InvalidInputError(f"stage {i} has {f.shape[1]} channels, expected {self.in_dims[i - 1]}")
            outs.append(upsample(getattr(self, f"proj{i}")(f), size))
        x = F.relu(self.bn(self.fuse(torch.cat(outs, dim=1))))
        logits = self.classifier(self.dropout(x))
        return logits if out_size is None else upsample(logits, out_size)


def seg_loss(logits: Tensor, mask: Tensor) -> Tensor:
    """Mean cross-entropy over pixels whose label is not 255."""
    if logits.shape[0] != mask.shape[0] or logits.shape[-2:] != mask.shape[-2:]:
        raise InvalidInputError(f"logits {tuple(logits.shape)} and mask {tuple(mask.shape)} disagree")
    mask = mask.long()
    if not bool((mask != IGNORE_INDEX).any()):
        warnings.warn("every pixel carries the ignore label; segmentation loss set to 0", RuntimeWarning)
        return logits.sum() * 0.0
    return F.cross_entropy(logits, mask, ignore_index=IGNORE_INDEX)


def predict(logits: Tensor) -> Tensor:
    """Class map; ties go to the lowest class index."""
    return logits.argmax(dim=1)
