"""Checkpoint archive: JSON model config plus named parameter tensors."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import torch

from .config import ModelConfig, model_config_from_dict, to_dict
from .errors import CheckpointError, ConfigError
from .model import ShareCMP

FORMAT_VERSION = 1


def save_checkpoint(path, model: ShareCMP, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "config_json": json.dumps(to_dict(model.cfg), sort_keys=True),
        "extra_json": json.dumps(extra or {}, sort_keys=True),
        "tensors": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
    }
    torch.save(payload, path)
    return path


def read_checkpoint(path) -> tuple[ModelConfig, dict, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        cfg = model_config_from_dict(json.loads(payload["config_json"]))
        extra = json.loads(payload.get("extra_json", "{}"))
        tensors = payload["tensors"]
    except (ConfigError, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} is malformed: {exc}") from None
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return cfg, tensors, extra


def load_checkpoint(path, dtype: Optional[torch.dtype] = None) -> tuple[ShareCMP, dict]:
    cfg, tensors, extra = read_checkpoint(path)
    model = ShareCMP(cfg)
    try:
        model.load_state_dict(tensors, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} does not match its config: {exc}") from None
    if dtype is not None:
        model = model.to(dtype)
    return model, extra
