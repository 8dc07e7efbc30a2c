"""Full segmentation network: PGA -> shared encoder -> MLP decoder (+ CPA head)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import Tensor, nn

from .config import ModelConfig
from .cpa import CPAAHead, CPAEstimates, build_targets, cpa_loss
from .decoder import MLPDecoder, seg_loss
from .encoder import ShareEncoder, StageFeatures
from .pga import PGA


@dataclass
class ModelOutput:
    logits: Tensor
    features: StageFeatures
    x_p: Tensor
    cpa: CPAEstimates = field(default_factory=dict)


class ShareCMP(nn.Module):
    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        self.cfg = (cfg or ModelConfig()).validate()
        enc = self.cfg.encoder
        self.pga = PGA(self.cfg.pga)
        self.encoder = ShareEncoder(enc)
        self.decoder = MLPDecoder(enc.dims, self.cfg.decoder)
        if self.cfg.cpa.enabled:
            self.cpaahead = CPAAHead(
                enc.dims, self.cfg.decoder.num_classes, self.cfg.cpa, hidden=self.cfg.decoder.embed_dim
            )
        else:
            self.cpaahead = None

    @property
    def num_classes(self) -> int:
        return self.cfg.decoder.num_classes

    def forward(
        self,
        rgb: Tensor,
        angles: Optional[Tensor] = None,
        representations: Optional[Tensor] = None,
        with_cpa: Optional[bool] = None,
    ) -> ModelOutput:
        x_p = self.pga(angles, representations)
        feats = self.encoder(rgb, x_p)
        size = rgb.shape[-2:]
        logits = self.decoder(feats, out_size=size)
        out = ModelOutput(logits, feats, x_p)
        if with_cpa is None:
            with_cpa = self.training
        if with_cpa and self.cpaahead is not None:
            out.cpa = self.cpaahead(feats, size)
        return out

    def losses(self, out: ModelOutput, batch: dict) -> dict[str, Tensor]:
        """Segmentation, CPA and total loss; total is exactly seg + cpa."""
        seg = seg_loss(out.logits, batch["mask"])
        if out.cpa:
            tgt = build_targets(batch["aolp"], batch["dolp"], batch["mask"], self.num_classes)
            cpa = cpa_loss(out.cpa, tgt, self.cfg.cpa)
        else:
            cpa = seg.new_zeros(())
        return {"seg_loss": seg, "cpa_loss": cpa, "loss": seg + cpa}


def build_model(cfg: Optional[ModelConfig] = None, dtype=torch.float32) -> ShareCMP:
    return ShareCMP(cfg).to(dtype)
