"""Training loop, LR schedule and evaluation."""
from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import RunConfig, TrainConfig, to_dict
from .data import DatasetIndex, Sample, augment, collate, load_sample
from .decoder import predict
from .errors import DatasetError, TrainingError
from .metrics import ConfusionMatrix
from .model import ShareCMP

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    return int(round(total_steps * cfg.warmup_epochs / cfg.epochs))


def poly_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Warmup from ``warmup_factor * lr`` to ``lr``, then poly decay to 0 at ``total_steps``."""
    w = warmup_steps(total_steps, cfg)
    step = min(max(step, 0), total_steps)
    if step < w:
        if cfg.warmup_mode == "constant":
            return cfg.lr * cfg.warmup_factor
        k = cfg.warmup_factor + (1.0 - cfg.warmup_factor) * step / w
        return cfg.lr * k
    span = total_steps - w
    if span <= 0:
        return cfg.lr
    return cfg.lr * (1.0 - (step - w) / span) ** cfg.power


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay
    )


def batch_forward(model: ShareCMP, batch: dict):
    return model(batch["rgb"], batch.get("angles"), batch.get("representations"))


def train_step(model: ShareCMP, batch: dict, optimizer: torch.optim.Optimizer, lr: float) -> dict[str, float]:
    """One forward/backward/AdamW update at learning rate ``lr``; returns the loss components."""
    model.train()
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    out = batch_forward(model, batch)
    losses = model.losses(out, batch)
    values = {k: float(v.detach()) for k, v in losses.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise TrainingError(f"non-finite loss: {json.dumps(values)}")
    losses["loss"].backward()
    optimizer.step()
    return values


@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    iou: np.ndarray
    miou: float
    class_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mIoU": self.miou,
            "pixel_accuracy": self.confusion.pixel_accuracy(),
            "per_class_iou": {
                name: (None if np.isnan(v) else float(v)) for name, v in zip(self.class_names, self.iou)
            },
            "confusion_matrix": self.confusion.to_list(),
        }

    def table(self) -> str:
        width = max([len(n) for n in self.class_names] + [5])
        lines = [f"{'Class':<{width}}  IoU(%)"]
        for name, v in zip(self.class_names, self.iou):
            lines.append(f"{name:<{width}}  {'n/a' if np.isnan(v) else f'{100 * v:6.2f}'}")
        lines.append(f"{'mIoU':<{width}}  {100 * self.miou:6.2f}")
        return "\n".join(lines)


@torch.no_grad()
def evaluate(
    model: ShareCMP,
    index: DatasetIndex,
    samples: Optional[list[Sample]] = None,
    batch_size: int = 4,
    representation: Optional[str] = None,
) -> EvalResult:
    """Full-image inference over a split; IoU per class and the mean over present classes."""
    if samples is None:
        if not index.ids:
            raise DatasetError(f"split {index.split!r} of {index.root} is empty")
        samples = [load_sample(index, sid) for sid in index.ids]
    if not samples:
        raise DatasetError("nothing to evaluate")
    if representation is None and model.cfg.pga.bypass:
        representation = model.cfg.pga.representation
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    cm = ConfusionMatrix(model.num_classes)
    for k in range(0, len(samples), batch_size):
        chunk = samples[k : k + batch_size]
        # group by size so differently sized images are not stacked together
        by_size: dict[tuple, list[Sample]] = {}
        for s in chunk:
            by_size.setdefault(s.mask.shape, []).append(s)
        for group in by_size.values():
            batch = collate(group, dtype=dtype, representation=representation)
            logits = batch_forward(model, batch).logits
            cm.update(predict(logits).numpy(), batch["mask"].numpy())
    model.train(was_training)
    names = index.class_names if index is not None else [f"class{i}" for i in range(model.num_classes)]
    return EvalResult(cm, cm.iou(), cm.miou(), list(names))


@dataclass
class TrainResult:
    history: list[dict]
    checkpoint: Optional[Path]
    eval: Optional[EvalResult]
    model: ShareCMP


def train(
    cfg: RunConfig,
    out_dir=None,
    index: Optional[DatasetIndex] = None,
    samples: Optional[list[Sample]] = None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """Train from scratch per ``cfg``; logs JSON lines and writes the final checkpoint to ``out_dir``."""
    cfg.validate()
    tc = cfg.train
    dtype = DTYPES[tc.dtype]
    seed_everything(tc.seed)
    if samples is None:
        if index is None:
            index = DatasetIndex.load(cfg.data.root, cfg.data.train_split)
        index.validate()
        samples = [load_sample(index, sid) for sid in index.ids]
    if not samples:
        raise DatasetError("training split is empty")
    if index is not None and index.num_classes != cfg.decoder.num_classes:
        raise DatasetError(
            f"dataset has {index.num_classes} classes but decoder.num_classes = {cfg.decoder.num_classes}"
        )

    model = ShareCMP(cfg.model).to(dtype)
    optimizer = make_optimizer(model, tc)
    rng = np.random.default_rng(tc.seed)
    representation = cfg.pga.representation if cfg.pga.bypass else None

    steps_per_epoch = math.ceil(len(samples) / tc.batch_size)
    total_steps = steps_per_epoch * tc.epochs
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    out_path = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "config.json").write_text(json.dumps(to_dict(cfg), indent=2) + "\n")
        log_file = open(out_path / "metrics.jsonl", "w")

    history: list[dict] = []
    step = 0
    ckpt = None
    try:
        for epoch in range(tc.epochs):
            order = rng.permutation(len(samples))
            for b in range(steps_per_epoch):
                if step >= total_steps:
                    break
                chosen = [samples[i] for i in order[b * tc.batch_size : (b + 1) * tc.batch_size]]
                chosen = [augment(s, cfg.augment, rng) for s in chosen]
                batch = collate(
                    chosen, dtype=dtype, representation=representation,
                    normalize_representations=cfg.data.normalize_representations,
                )
                lr = poly_lr(step, total_steps, tc)
                losses = train_step(model, batch, optimizer, lr)
                record = {"step": step, "epoch": epoch, "lr": lr, **losses}
                history.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
                step += 1
            if out_path is not None and tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
                save_checkpoint(out_path / f"epoch_{epoch + 1:04d}.pt", model, {"epoch": epoch + 1, "step": step})
            if step >= total_steps:
                break
        result_eval = None
        if tc.eval_at_end:
            eval_index = index
            eval_samples = None
            if index is None:
                eval_samples = samples
            elif cfg.data.root and cfg.data.val_split:
                try:
                    eval_index = DatasetIndex.load(index.root, cfg.data.val_split).validate()
                except DatasetError:
                    eval_index, eval_samples = index, samples
            else:
                eval_samples = samples
            result_eval = evaluate(model, eval_index, eval_samples, representation=representation)
            record = {"step": step, "epoch": epoch, "mIoU": result_eval.miou, "split": eval_index.split if eval_index else None}
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
        if out_path is not None:
            ckpt = save_checkpoint(out_path / "checkpoint.pt", model, {"step": step, "seed": tc.seed})
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(history, ckpt, result_eval, model)
