"""Four-angle RGB-P datasets: on-disk layout, synthetic scenes, augmentation.

Layout under a dataset root::

    manifest.json
    <split>/images/000/<id>.png   # likewise 045, 090, 135
    <split>/labels/<id>.png       # 8-bit class ids, 255 = ignore

Datasets that ship representations instead of angle images use
``<split>/images/rgb/<id>.png`` plus ``<split>/images/<kind>/<id>.png``
(8-bit, scaled over the kind's value range).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import AugmentConfig
from .errors import DatasetError, InvalidInputError
from .polarization import (
    ANGLES_DEG,
    PolarizedImageSet,
    RepresentationKind,
    RepresentationMap,
    compute_representation,
    compute_stokes,
    luminance_stokes,
    representation_to_unit,
    synthesize_polarized,
    to_uint8,
)

IGNORE_INDEX = 255
MANIFEST = "manifest.json"
ANGLE_DIRS = tuple(f"{a:03d}" for a in ANGLES_DEG)
MODALITIES = ("angles", "representations")


@dataclass
class Sample:
    id: str
    rgb: np.ndarray
    mask: np.ndarray
    aolp_target: np.ndarray
    dolp_target: np.ndarray
    polarized: Optional[PolarizedImageSet] = None
    representations: Optional[list[RepresentationMap]] = None

    def __post_init__(self):
        if (self.polarized is None) == (self.representations is None):
            raise InvalidInputError("a sample holds exactly one of polarized images or representations")
        h, w = self.rgb.shape[:2]
        if self.mask.shape != (h, w):
            raise InvalidInputError(f"mask shape {self.mask.shape} does not match image size {(h, w)}")
        if self.aolp_target.shape != (h, w) or self.dolp_target.shape != (h, w):
            raise InvalidInputError("polarization targets must be H x W")
        if self.polarized is not None and self.polarized.shape[:2] != (h, w):
            raise InvalidInputError("angle images do not match the rgb size")


def polarization_targets(p: PolarizedImageSet) -> tuple[np.ndarray, np.ndarray]:
    """Single-channel AoLP and DoLP from luma-weighted Stokes components."""
    s = luminance_stokes(compute_stokes(p))
    aolp = compute_representation(s, RepresentationKind.AOLP).values[..., 0]
    dolp = compute_representation(s, RepresentationKind.DOLP).values[..., 0]
    return aolp, dolp


def sample_from_polarized(sample_id: str, p: PolarizedImageSet, mask: np.ndarray) -> Sample:
    aolp, dolp = polarization_targets(p)
    rgb = np.atleast_3d(compute_stokes(p).s0)
    return Sample(sample_id, rgb, np.asarray(mask), aolp, dolp, polarized=p)


@dataclass
class DatasetIndex:
    root: Path
    split: str
    ids: list[str]
    num_classes: int
    class_names: list[str]
    modality: str = "angles"
    representation_kinds: list[str] = field(default_factory=list)
    palette: list[list[int]] = field(default_factory=list)

    @classmethod
    def load(cls, root, split: str) -> "DatasetIndex":
        root = Path(root)
        path = root / MANIFEST
        try:
            manifest = json.loads(path.read_text())
        except FileNotFoundError:
            raise DatasetError(f"dataset manifest not found: {path}") from None
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read manifest {path}: {exc}") from None
        splits = manifest.get("splits", {})
        if split not in splits:
            raise DatasetError(f"split {split!r} not in {path} (have {sorted(splits)})")
        modality = manifest.get("modality", "angles")
        if modality not in MODALITIES:
            raise DatasetError(f"unknown modality {modality!r} in {path}")
        return cls(
            root=root,
            split=split,
            ids=list(splits[split]),
            num_classes=int(manifest["num_classes"]),
            class_names=list(manifest.get("class_names") or [f"class{i}" for i in range(manifest["num_classes"])]),
            modality=modality,
            representation_kinds=list(manifest.get("representation_kinds", [])),
            palette=list(manifest.get("palette", [])),
        )

    @property
    def split_dir(self) -> Path:
        return self.root / self.split

    def image_paths(self, sample_id: str) -> dict[str, Path]:
        img = self.split_dir / "images"
        if self.modality == "angles":
            names = ANGLE_DIRS
        else:
            names = ("rgb", *self.representation_kinds)
        paths = {n: img / n / f"{sample_id}.png" for n in names}
        paths["label"] = self.split_dir / "labels" / f"{sample_id}.png"
        return paths

    def validate(self) -> "DatasetIndex":
        if not self.ids:
            raise DatasetError(f"split {self.split!r} of {self.root} is empty")
        for sid in self.ids:
            for p in self.image_paths(sid).values():
                if not p.is_file():
                    raise DatasetError(f"missing dataset file: {p}")
        return self

    def class_palette(self) -> np.ndarray:
        if self.palette:
            return np.asarray(self.palette, dtype=np.uint8)
        return default_palette(self.num_classes)

    def __len__(self) -> int:
        return len(self.ids)


def default_palette(n: int) -> np.ndarray:
    rng = np.random.default_rng(12345)
    pal = rng.integers(40, 256, size=(max(n, 1), 3), dtype=np.uint8)
    pal[0] = (0, 0, 0)
    return pal


def _read_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing dataset file: {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except OSError as exc:
        raise DatasetError(f"cannot decode {path}: {exc}") from None


def _unit(img: np.ndarray) -> np.ndarray:
    return np.atleast_3d(img.astype(np.float64) / 255.0)


def load_sample(index: DatasetIndex, sample_id: str) -> Sample:
    if sample_id not in index.ids:
        raise DatasetError(f"id {sample_id!r} not in split {index.split!r} of {index.root}")
    paths = index.image_paths(sample_id)
    mask = _read_png(paths["label"])
    if mask.ndim != 2:
        raise InvalidInputError(f"label {paths['label']} must be single-channel")
    if index.modality == "angles":
        imgs = [_unit(_read_png(paths[d])) for d in ANGLE_DIRS]
        if len({im.shape for im in imgs}) != 1:
            raise InvalidInputError(f"angle images of {sample_id!r} disagree in size")
        if imgs[0].shape[:2] != mask.shape:
            raise InvalidInputError(f"label size {mask.shape} differs from image size {imgs[0].shape[:2]} for {sample_id!r}")
        return sample_from_polarized(sample_id, PolarizedImageSet(*imgs), mask.astype(np.int64))

    rgb = _unit(_read_png(paths["rgb"]))
    if rgb.shape[:2] != mask.shape:
        raise InvalidInputError(f"label size {mask.shape} differs from image size {rgb.shape[:2]} for {sample_id!r}")
    reps = []
    for name in index.representation_kinds:
        kind = RepresentationKind.parse(name)
        lo, hi = kind.value_range
        reps.append(RepresentationMap(kind, lo + _unit(_read_png(paths[name])) * (hi - lo)))
    by_kind = {r.kind: r.values for r in reps}
    aolp = by_kind.get(RepresentationKind.AOLP)
    dolp = by_kind.get(RepresentationKind.DOLP)
    h, w = mask.shape
    aolp = np.zeros((h, w)) if aolp is None else _collapse(aolp)
    dolp = np.zeros((h, w)) if dolp is None else _collapse(dolp)
    return Sample(sample_id, rgb, mask.astype(np.int64), aolp, dolp, representations=reps)


def _collapse(values: np.ndarray) -> np.ndarray:
    values = np.atleast_3d(values)
    if values.shape[2] == 3:
        return values @ np.array([0.299, 0.587, 0.114])
    return values[..., 0]


# --------------------------------------------------------------------------- synthetic


@dataclass
class ClassStyle:
    dolp: float
    aolp: float
    color: tuple[float, float, float]


@dataclass
class SyntheticSceneSpec:
    """Random-shape scenes; class 0 fills the background."""

    size: tuple[int, int] = (64, 64)
    classes: list[ClassStyle] = field(default_factory=lambda: [
        ClassStyle(0.1, 0.0, (0.35, 0.45, 0.55)),
        ClassStyle(0.8, math.pi / 4, (0.9, 0.35, 0.25)),
        ClassStyle(0.5, -math.pi / 3, (0.25, 0.8, 0.35)),
    ])
    class_names: Optional[list[str]] = None
    seed: int = 0
    shapes_per_image: tuple[int, int] = (2, 4)
    noise: float = 0.0

    def __post_init__(self):
        self.classes = [c if isinstance(c, ClassStyle) else ClassStyle(**c) for c in self.classes]
        self.size = tuple(self.size)
        self.shapes_per_image = tuple(self.shapes_per_image)
        self.validate()

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def validate(self):
        if len(self.size) != 2 or min(self.size) < 1:
            raise InvalidInputError("size must be (H, W)")
        if not 1 <= len(self.classes) <= 255:
            raise InvalidInputError("need between 1 and 255 classes")
        for i, c in enumerate(self.classes):
            if not 0 <= c.dolp <= 1:
                raise InvalidInputError(f"class {i}: dolp must be in [0, 1]")
            if not -math.pi / 2 < c.aolp <= math.pi / 2:
                raise InvalidInputError(f"class {i}: aolp must be in (-pi/2, pi/2]")
            if len(c.color) != 3 or not all(0 <= v <= 1 for v in c.color):
                raise InvalidInputError(f"class {i}: color must be 3 values in [0, 1]")
        lo, hi = self.shapes_per_image
        if not 0 <= lo <= hi:
            raise InvalidInputError("shapes_per_image must be (min, max)")
        if self.class_names is not None and len(self.class_names) != len(self.classes):
            raise InvalidInputError("class_names must match classes")

    @classmethod
    def from_dict(cls, values: dict) -> "SyntheticSceneSpec":
        known = {"size", "classes", "class_names", "seed", "shapes_per_image", "noise"}
        unknown = set(values) - known
        if unknown:
            raise InvalidInputError(f"unknown synthetic spec key(s): {', '.join(sorted(unknown))}")
        return cls(**values)

    def to_dict(self) -> dict:
        return {
            "size": list(self.size),
            "classes": [{"dolp": c.dolp, "aolp": c.aolp, "color": list(c.color)} for c in self.classes],
            "class_names": self.names(),
            "seed": self.seed,
            "shapes_per_image": list(self.shapes_per_image),
            "noise": self.noise,
        }

    def names(self) -> list[str]:
        return list(self.class_names) if self.class_names else [f"class{i}" for i in range(self.num_classes)]


def random_layout(spec: SyntheticSceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.size
    mask = np.zeros((h, w), dtype=np.uint8)
    if spec.num_classes == 1:
        return mask
    yy, xx = np.mgrid[0:h, 0:w]
    n = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    for _ in range(n):
        cls = int(rng.integers(1, spec.num_classes))
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.12, 0.35) * h, rng.uniform(0.12, 0.35) * w
        if rng.random() < 0.5:
            region = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        mask[region] = cls
    return mask


def render_scene(spec: SyntheticSceneSpec, mask: np.ndarray, rng: Optional[np.random.Generator] = None) -> PolarizedImageSet:
    """Render the four angle images of a labeled scene through Malus's law."""
    color = np.array([c.color for c in spec.classes], dtype=np.float64)[mask]
    dolp = np.array([c.dolp for c in spec.classes], dtype=np.float64)[mask][..., None]
    aolp = np.array([c.aolp for c in spec.classes], dtype=np.float64)[mask][..., None]
    p = synthesize_polarized((1 - dolp) * color, dolp * color, np.broadcast_to(aolp, color.shape))
    if spec.noise > 0 and rng is not None:
        p = PolarizedImageSet(*(np.clip(a + rng.normal(0, spec.noise, a.shape), 0, 1) for a in p.as_tuple()))
    return p


def _write_png(path: Path, arr: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def _update_manifest(root: Path, split: str, ids: list[str], spec: SyntheticSceneSpec) -> dict:
    path = root / MANIFEST
    manifest = json.loads(path.read_text()) if path.is_file() else {}
    manifest.update(
        {
            "num_classes": spec.num_classes,
            "class_names": spec.names(),
            "modality": "angles",
            "palette": default_palette(spec.num_classes).tolist(),
            "synthetic_spec": spec.to_dict(),
        }
    )
    manifest.setdefault("splits", {})[split] = ids
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def generate_synthetic_dataset(spec: SyntheticSceneSpec, n: int, root, split: str = "train") -> DatasetIndex:
    """Write ``n`` Malus-rendered scenes under ``root/split`` and register them in the manifest."""
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    root = Path(root)
    # split name is mixed into the seed so train/val scenes differ
    rng = np.random.default_rng([spec.seed, sum(map(ord, split))])
    ids = []
    try:
        root.mkdir(parents=True, exist_ok=True)
        for k in range(n):
            sid = f"{k:05d}"
            mask = random_layout(spec, rng)
            p = render_scene(spec, mask, rng)
            for d, img in zip(ANGLE_DIRS, p.as_tuple()):
                _write_png(root / split / "images" / d / f"{sid}.png", to_uint8(img))
            _write_png(root / split / "labels" / f"{sid}.png", mask)
            ids.append(sid)
        _update_manifest(root, split, ids, spec)
    except PermissionError as exc:
        raise OSError(f"cannot write synthetic dataset under {root}: {exc}") from exc
    return DatasetIndex.load(root, split).validate()


# --------------------------------------------------------------------------- augmentation


def _resize(arr: np.ndarray, size: tuple[int, int], mode: str) -> np.ndarray:
    """Resize H x W [x C] arrays with torch interpolation."""
    squeeze = arr.ndim == 2
    t = torch.from_numpy(np.ascontiguousarray(arr if not squeeze else arr[..., None]))
    t = t.permute(2, 0, 1)[None].to(torch.float64)
    if mode == "nearest":
        out = F.interpolate(t, size=size, mode="nearest")
    else:
        out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    out = out[0].permute(1, 2, 0).numpy()
    return out[..., 0] if squeeze else out


def _pad_crop(arr: np.ndarray, top: int, left: int, size: tuple[int, int], fill) -> np.ndarray:
    hc, wc = size
    out = np.full((hc, wc) + arr.shape[2:], fill, dtype=arr.dtype)
    part = arr[top : top + hc, left : left + wc]
    out[: part.shape[0], : part.shape[1]] = part
    return out


def _wrap_aolp(a: np.ndarray) -> np.ndarray:
    return np.where(a <= -math.pi / 2, a + math.pi, a)


_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])


def _hue_matrix(turn: float) -> np.ndarray:
    c, s = math.cos(2 * math.pi * turn), math.sin(2 * math.pi * turn)
    rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    return np.linalg.inv(_YIQ) @ rot @ _YIQ


def _gray(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != 3:
        return x
    return (x @ np.array([0.299, 0.587, 0.114]))[..., None]


def color_jitter(images: Sequence[np.ndarray], cfg: AugmentConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Apply one randomly drawn photometric transform identically to every image."""
    ops = []
    if rng.random() < cfg.jitter_prob and cfg.brightness > 0:
        ops.append(("brightness", rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)))
    if rng.random() < cfg.jitter_prob and cfg.contrast > 0:
        ops.append(("contrast", rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)))
    if rng.random() < cfg.jitter_prob and cfg.saturation > 0:
        ops.append(("saturation", rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)))
    if rng.random() < cfg.jitter_prob and cfg.hue > 0:
        ops.append(("hue", rng.uniform(-cfg.hue, cfg.hue)))
    out = [np.asarray(x, dtype=np.float64) for x in images]
    # one shared contrast pivot keeps the transform identical across images
    pivot = float(np.mean([_gray(x).mean() for x in out]))
    for name, v in ops:
        if name == "brightness":
            out = [x * v for x in out]
        elif name == "contrast":
            out = [(x - pivot) * v + pivot for x in out]
        elif name == "saturation":
            out = [_gray(x) + (x - _gray(x)) * v for x in out]
        elif name == "hue" and out[0].shape[-1] == 3:
            m = _hue_matrix(v)
            out = [x @ m.T for x in out]
    return [np.clip(x, 0.0, 1.0) for x in out]


def hflip(sample: Sample, mode: str = "naive") -> Sample:
    """Mirror left-right. ``physical`` also swaps the 45/135 images and negates AoLP."""
    f = lambda a: np.ascontiguousarray(a[:, ::-1])
    aolp = f(sample.aolp_target)
    pol = reps = None
    if sample.polarized is not None:
        i0, i45, i90, i135 = (f(a) for a in sample.polarized.as_tuple())
        if mode == "physical":
            i45, i135 = i135, i45
        pol = PolarizedImageSet(i0, i45, i90, i135)
    if sample.representations is not None:
        reps = []
        for r in sample.representations:
            v = f(r.values)
            if mode == "physical" and r.kind in (RepresentationKind.AOLP, RepresentationKind.SAOLP):
                v = -v
                if r.kind is RepresentationKind.AOLP:
                    v = _wrap_aolp(v)
            reps.append(RepresentationMap(r.kind, v))
    if mode == "physical":
        aolp = _wrap_aolp(-aolp)
    return replace(
        sample,
        rgb=f(sample.rgb),
        mask=f(sample.mask),
        aolp_target=aolp,
        dolp_target=f(sample.dolp_target),
        polarized=pol,
        representations=reps,
    )


def _geometric(sample: Sample, fn_img, fn_mask) -> Sample:
    pol = None
    if sample.polarized is not None:
        pol = PolarizedImageSet(*(np.clip(fn_img(a, 0.0), 0, None) for a in sample.polarized.as_tuple()))
    reps = None
    if sample.representations is not None:
        reps = [RepresentationMap(r.kind, fn_img(r.values, 0.0)) for r in sample.representations]
    rgb = np.atleast_3d(compute_stokes(pol).s0) if pol is not None else fn_img(sample.rgb, 0.0)
    return replace(
        sample,
        rgb=rgb,
        mask=fn_mask(sample.mask),
        aolp_target=fn_img(sample.aolp_target, 0.0),
        dolp_target=fn_img(sample.dolp_target, 0.0),
        polarized=pol,
        representations=reps,
    )


def random_resize(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    h, w = sample.mask.shape
    base = 1.0
    if cfg.scale:
        base = min(cfg.scale[0] / h, cfg.scale[1] / w)
    ratio = rng.uniform(*cfg.resize_ratio_range)
    size = (max(1, int(round(h * base * ratio))), max(1, int(round(w * base * ratio))))
    if size == (h, w):
        return sample
    return _geometric(
        sample,
        lambda a, fill: _resize(a, size, "bilinear"),
        lambda m: _resize(m, size, "nearest").round().astype(m.dtype),
    )


def random_crop(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    h, w = sample.mask.shape
    hc, wc = cfg.crop_size
    top = int(rng.integers(0, max(h - hc, 0) + 1))
    left = int(rng.integers(0, max(w - wc, 0) + 1))
    if (h, w) == (hc, wc):
        return sample
    return _geometric(
        sample,
        lambda a, fill: _pad_crop(a, top, left, (hc, wc), fill),
        lambda m: _pad_crop(m, top, left, (hc, wc), IGNORE_INDEX),
    )


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Random resize, crop, horizontal flip and color jitter, consistent across modalities."""
    if not cfg.enabled:
        return sample
    sample = random_resize(sample, cfg, rng)
    sample = random_crop(sample, cfg, rng)
    if rng.random() < cfg.hflip_prob:
        sample = hflip(sample, cfg.hflip_mode)
    if sample.polarized is not None:
        jittered = color_jitter(sample.polarized.as_tuple(), cfg, rng)
        pol = PolarizedImageSet(*jittered)
        return replace(sample, polarized=pol, rgb=np.atleast_3d(compute_stokes(pol).s0))
    (rgb,) = color_jitter([sample.rgb], cfg, rng)
    return replace(sample, rgb=rgb)


# --------------------------------------------------------------------------- batching


def polarization_input(sample: Sample, kind: Optional[str] = None, normalize: bool = True) -> np.ndarray:
    """H x W x 3 representation stack fed to the encoder when the PGA is bypassed."""
    if sample.representations is not None:
        maps = [representation_to_unit(r) if normalize else r.values for r in sample.representations]
        stack = np.concatenate([np.atleast_3d(m) for m in maps], axis=-1)
    else:
        r = compute_representation(compute_stokes(sample.polarized), kind or "aolp")
        stack = np.atleast_3d(representation_to_unit(r) if normalize else r.values)
    if stack.shape[2] == 1:
        stack = np.repeat(stack, 3, axis=2)
    return stack


def _chw(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.atleast_3d(a).transpose(2, 0, 1)))


def collate(
    samples: Sequence[Sample],
    dtype=torch.float32,
    representation: Optional[str] = None,
    normalize_representations: bool = True,
) -> dict:
    """Stack samples into tensors. ``representation`` requests a bypass stack."""
    batch = {
        "ids": [s.id for s in samples],
        "rgb": torch.stack([_chw(s.rgb) for s in samples]).to(dtype),
        "mask": torch.stack([torch.from_numpy(np.asarray(s.mask, dtype=np.int64)) for s in samples]),
        "aolp": torch.stack([torch.from_numpy(np.asarray(s.aolp_target)) for s in samples]).to(dtype),
        "dolp": torch.stack([torch.from_numpy(np.asarray(s.dolp_target)) for s in samples]).to(dtype),
        "angles": None,
        "representations": None,
    }
    if all(s.polarized is not None for s in samples):
        batch["angles"] = torch.stack([_chw(s.polarized.stack()) for s in samples]).to(dtype)
    if representation is not None or any(s.polarized is None for s in samples):
        batch["representations"] = torch.stack(
            [_chw(polarization_input(s, representation, normalize_representations)) for s in samples]
        ).to(dtype)
    return batch
