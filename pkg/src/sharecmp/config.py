"""Configuration dataclasses, presets and dotted-path overrides.

A run config is a JSON object with the sections ``encoder``, ``pga``, ``cpa``,
``decoder``, ``train``, ``data`` and ``augment`` plus an optional ``preset``
(``"b2"`` or ``"tiny"``) naming the base values the file overrides.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError

STAGES = (1, 2, 3, 4)


@dataclass
class EncoderConfig:
    """Four-stage shared encoder. Defaults follow the MiT-B2 shape."""

    dims: tuple[int, ...] = (64, 128, 320, 512)
    depths: tuple[int, ...] = (3, 4, 6, 3)
    heads: tuple[int, ...] = (1, 2, 5, 8)
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    mlp_ratio: int = 4
    patch_sizes: tuple[int, ...] = (7, 3, 3, 3)
    strides: tuple[int, ...] = (4, 2, 2, 2)
    in_channels: int = 3
    me_opembed_stages: tuple[int, ...] = (1, 2, 3, 4)
    share_trunk: bool = True
    fusion_reduction: int = 1

    def validate(self):
        for name in ("dims", "depths", "heads", "sr_ratios", "patch_sizes", "strides"):
            if len(getattr(self, name)) != 4:
                raise ConfigError(f"encoder.{name} needs 4 entries")
        for d, h in zip(self.dims, self.heads):
            if h < 1 or d % h:
                raise ConfigError(f"encoder.dims {d} not divisible by heads {h}")
        if any(x < 1 for x in (*self.dims, *self.depths, *self.sr_ratios, self.mlp_ratio)):
            raise ConfigError("encoder sizes must be positive")
        if not set(self.me_opembed_stages) <= set(STAGES):
            raise ConfigError(f"encoder.me_opembed_stages must be a subset of {STAGES}")
        stride = 1
        for s in self.strides:
            stride *= s
        if stride != 32:
            raise ConfigError(f"encoder strides must multiply to 32, got {stride}")
        if self.fusion_reduction < 1 or any(d % self.fusion_reduction for d in self.dims):
            raise ConfigError("encoder.fusion_reduction must divide every stage dim")

    def stage_strides(self) -> tuple[int, ...]:
        out, acc = [], 1
        for s in self.strides:
            acc *= s
            out.append(acc)
        return tuple(out)


@dataclass
class PGAConfig:
    mid_channels: int = 32
    in_channels_per_angle: int = 3
    dilation: int = 2
    groups: int = 1
    out_channels: int = 3
    prelu_per_channel: bool = True
    bypass: bool = False
    # representation fed instead of the PGA output when bypassing four-angle data
    representation: str = "aolp"

    def validate(self):
        if self.out_channels != 3:
            raise ConfigError("pga.out_channels must be 3")
        if self.dilation != 2:
            raise ConfigError("pga.dilation must be 2")
        if self.mid_channels < 1 or self.groups < 1 or (4 * self.mid_channels) % self.groups:
            raise ConfigError("pga.groups must divide 4 * pga.mid_channels")
        if self.in_channels_per_angle not in (1, 3):
            raise ConfigError("pga.in_channels_per_angle must be 1 or 3")
        from .polarization import RepresentationKind

        try:
            RepresentationKind.parse(self.representation)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class CPAConfig:
    enabled: bool = True
    active_stages: tuple[int, ...] = (3, 4)
    loss_weight: float = 0.01
    # "mean" averages over pixels; "sum" is the bare pixel sum
    reduction: str = "mean"
    hidden_channels: Optional[int] = None

    def validate(self):
        if not set(self.active_stages) <= set(STAGES):
            raise ConfigError(f"cpa.active_stages must be a subset of {STAGES}")
        if self.enabled and not self.active_stages:
            raise ConfigError("cpa.active_stages must be non-empty when CPA loss is enabled")
        if self.loss_weight < 0:
            raise ConfigError("cpa.loss_weight must be >= 0")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError("cpa.reduction must be 'mean' or 'sum'")


@dataclass
class DecoderConfig:
    num_classes: int = 12
    embed_dim: int = 256
    dropout: float = 0.1

    def validate(self):
        if self.embed_dim <= 0:
            raise ConfigError("decoder.embed_dim must be positive")
        if not 1 <= self.num_classes <= 255:
            raise ConfigError("decoder.num_classes must be in [1, 255]")
        if not 0 <= self.dropout < 1:
            raise ConfigError("decoder.dropout must be in [0, 1)")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pga: PGAConfig = field(default_factory=PGAConfig)
    cpa: CPAConfig = field(default_factory=CPAConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def validate(self):
        for part in (self.encoder, self.pga, self.cpa, self.decoder):
            part.validate()
        return self


@dataclass
class TrainConfig:
    lr: float = 6e-5
    power: float = 1.0
    warmup_epochs: int = 5
    warmup_factor: float = 1e-6
    warmup_mode: str = "linear"
    weight_decay: float = 0.01
    betas: tuple[float, ...] = (0.9, 0.999)
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    checkpoint_every: int = 0
    eval_at_end: bool = True
    dtype: str = "float32"

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if self.epochs < self.warmup_epochs or self.epochs < 1:
            raise ConfigError("train.epochs must be >= train.warmup_epochs and >= 1")
        if self.warmup_mode not in ("linear", "constant"):
            raise ConfigError("train.warmup_mode must be 'linear' or 'constant'")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not 0 < self.warmup_factor <= 1:
            raise ConfigError("train.warmup_factor must be in (0, 1]")
        if len(self.betas) != 2:
            raise ConfigError("train.betas needs 2 entries")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")


@dataclass
class DataConfig:
    root: str = ""
    train_split: str = "train"
    val_split: str = "val"
    normalize_representations: bool = True

    def validate(self):
        pass


@dataclass
class AugmentConfig:
    enabled: bool = True
    # base (H, W) the image is fitted into before the random ratio; empty keeps native size
    scale: tuple[int, ...] = ()
    resize_ratio_range: tuple[float, ...] = (0.5, 2.0)
    hflip_prob: float = 0.5
    hflip_mode: str = "naive"
    jitter_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    crop_size: tuple[int, ...] = (512, 612)

    def validate(self):
        lo, hi = self.resize_ratio_range if len(self.resize_ratio_range) == 2 else (0, 0)
        if not 0 < lo <= hi:
            raise ConfigError("augment.resize_ratio_range must be two positive increasing values")
        if self.hflip_mode not in ("naive", "physical"):
            raise ConfigError("augment.hflip_mode must be 'naive' or 'physical'")
        if len(self.crop_size) != 2 or min(self.crop_size) < 1:
            raise ConfigError("augment.crop_size must be (H, W)")
        if self.scale and (len(self.scale) != 2 or min(self.scale) < 1):
            raise ConfigError("augment.scale must be empty or (H, W)")
        for name in ("hflip_prob", "jitter_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"augment.{name} must be a probability")
        if not 0 <= self.hue <= 0.5:
            raise ConfigError("augment.hue must be in [0, 0.5]")


@dataclass
class RunConfig:
    preset: str = "b2"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pga: PGAConfig = field(default_factory=PGAConfig)
    cpa: CPAConfig = field(default_factory=CPAConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.encoder, self.pga, self.cpa, self.decoder)

    def validate(self) -> "RunConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {sorted(PRESETS)}")
        self.model.validate()
        for part in (self.train, self.data, self.augment):
            part.validate()
        return self

    def to_dict(self) -> dict:
        return to_dict(self)


SECTIONS = ("encoder", "pga", "cpa", "decoder", "train", "data", "augment")


def tiny_overrides() -> dict:
    return {
        "encoder": {"dims": [16, 32, 64, 128], "depths": [1, 1, 1, 1], "heads": [1, 2, 4, 8]},
        "pga": {"mid_channels": 8},
        "decoder": {"embed_dim": 64},
        "augment": {"crop_size": [64, 64]},
    }


PRESETS = {"b2": dict, "tiny": tiny_overrides}


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(x) for x in obj]
    return obj


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        return _coerce(value, hint, path)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(hint, value, path)
    if origin is tuple:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, values: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        where = f" in {path}" if path else ""
        raise ConfigError(f"unknown config key(s){where}: {', '.join(sorted(unknown))}")
    kwargs = {
        k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in values.items()
    }
    return cls(**kwargs)


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def run_config_from_dict(values: dict) -> RunConfig:
    if not isinstance(values, dict):
        raise ConfigError("config root must be a JSON object")
    preset = values.get("preset", "b2")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    merged = _deep_merge(PRESETS[preset](), values)
    merged["preset"] = preset
    return _build(RunConfig, merged).validate()


def preset_config(name: str = "b2", **sections) -> RunConfig:
    return run_config_from_dict({"preset": name, **sections})


def parse_override_value(raw: str, current):
    """Interpret a CLI override string using the type of the current value."""
    text = raw.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if isinstance(current, tuple) or "," in text:
        items = [t for t in text.split(",") if t.strip()]
        out = []
        for t in items:
            try:
                out.append(json.loads(t))
            except json.JSONDecodeError:
                out.append(t.strip())
        return out
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def apply_overrides(values: dict, overrides: dict[str, str]) -> dict:
    """Apply ``{"cpa.active_stages": "3,4"}``-style overrides to a raw config dict."""
    values = json.loads(json.dumps(values))
    preset = values.get("preset", "b2")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    reference = to_dict(_build(RunConfig, _deep_merge(PRESETS[preset](), {"preset": preset})))
    for key, raw in overrides.items():
        parts = key.split(".")
        if key == "preset":
            values["preset"] = raw
            continue
        if len(parts) != 2 or parts[0] not in SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        section, name = parts
        if name not in reference[section]:
            raise ConfigError(f"unknown config key {key!r}")
        current = reference[section][name]
        if isinstance(current, list):
            current = tuple(current)
        values.setdefault(section, {})[name] = parse_override_value(raw, current)
    return values


def load_run_config(path=None, overrides: Optional[dict[str, str]] = None) -> RunConfig:
    values: dict = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if overrides:
        values = apply_overrides(values, overrides)
    return run_config_from_dict(values)


def describe_keys() -> list[tuple[str, str]]:
    """(dotted key, default) for every config key, from the b2 defaults."""
    rows = [("preset", json.dumps("b2"))]
    base = to_dict(RunConfig())
    for section in SECTIONS:
        for name, default in base[section].items():
            rows.append((f"{section}.{name}", json.dumps(default)))
    return rows


def model_config_from_dict(values: dict) -> ModelConfig:
    return _build(ModelConfig, values).validate()
