"""Stokes parameters and linear-polarization representations.

All maps are numpy arrays laid out H x W x C (C is 1 or 3); every formula is
applied per channel. Intensities are unitless and normalized to [0, 1].
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidInputError

ANGLES_DEG = (0, 45, 90, 135)

# ITU-R BT.601 luma weights, used to collapse color Stokes maps to one channel.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class RepresentationKind(str, enum.Enum):
    AOLP = "aolp"
    DOLP = "dolp"
    SAOLP = "saolp"
    CAOLP = "caolp"

    @classmethod
    def parse(cls, value: "str | RepresentationKind") -> "RepresentationKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidInputError(
                f"unknown representation kind {value!r}; expected one of "
                f"{[k.value for k in cls]}"
            ) from None

    @property
    def value_range(self) -> tuple[float, float]:
        return REPRESENTATION_RANGES[self]


REPRESENTATION_RANGES = {
    RepresentationKind.AOLP: (-math.pi / 2, math.pi / 2),
    RepresentationKind.DOLP: (0.0, 1.0),
    RepresentationKind.SAOLP: (-math.pi / 4, math.pi / 4),
    RepresentationKind.CAOLP: (0.0, math.pi / 2),
}


def _as_map(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise InvalidInputError(f"{name} must be H x W or H x W x C, got shape {arr.shape}")
    if arr.ndim == 3 and arr.shape[2] not in (1, 3):
        raise InvalidInputError(f"{name} must have 1 or 3 channels, got {arr.shape[2]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class PolarizedImageSet:
    """Four co-registered intensity images behind polarizers at 0/45/90/135 degrees."""

    i0: np.ndarray
    i45: np.ndarray
    i90: np.ndarray
    i135: np.ndarray

    def __post_init__(self):
        maps = {}
        for name in ("i0", "i45", "i90", "i135"):
            arr = _as_map(getattr(self, name), name)
            if np.any(arr < 0):
                raise InvalidInputError(f"{name} has negative intensities")
            maps[name] = arr
        shapes = {arr.shape for arr in maps.values()}
        if len(shapes) != 1:
            raise InvalidInputError(f"angle images disagree in shape: {sorted(shapes)}")
        for name, arr in maps.items():
            object.__setattr__(self, name, arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.i0.shape

    def as_tuple(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.i0, self.i45, self.i90, self.i135

    def stack(self) -> np.ndarray:
        """Concatenate along channels in angle order -> H x W x 4C."""
        return np.concatenate([np.atleast_3d(a) for a in self.as_tuple()], axis=-1)


@dataclass(frozen=True)
class StokesMap:
    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.s0.shape


@dataclass(frozen=True)
class RepresentationMap:
    kind: RepresentationKind
    values: np.ndarray

    @property
    def value_range(self) -> tuple[float, float]:
        return self.kind.value_range


def compute_stokes(p: PolarizedImageSet) -> StokesMap:
    """Linear Stokes components; S0 averages both orthogonal polarizer pairs."""
    if not isinstance(p, PolarizedImageSet):
        raise InvalidInputError("compute_stokes expects a PolarizedImageSet")
    s0 = (p.i0 + p.i90 + p.i45 + p.i135) / 2.0
    s1 = p.i0 - p.i90
    s2 = p.i45 - p.i135
    return StokesMap(s0, s1, s2)


def _check_stokes(s: StokesMap) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    arrs = []
    for name in ("s0", "s1", "s2"):
        arr = np.asarray(getattr(s, name), dtype=np.float64)
        if np.any(np.isnan(arr)):
            raise InvalidInputError(f"{name} contains NaN")
        arrs.append(arr)
    if not (arrs[0].shape == arrs[1].shape == arrs[2].shape):
        raise InvalidInputError("Stokes components disagree in shape")
    return arrs[0], arrs[1], arrs[2]


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    valid = den > 0
    out = np.zeros_like(num)
    with np.errstate(over="ignore"):
        np.divide(num, den, out=out, where=valid)
    return out, valid


def compute_representation(
    s: StokesMap, kind: "RepresentationKind | str", *, aolp_mode: str = "atan2"
) -> RepresentationMap:
    """Evaluate AoLP, DoLP, SAoLP or CAoLP per pixel and channel.

    ``aolp_mode="atan"`` gives the single-argument form ``0.5 * arctan(S2 / S1)``
    whose range is only [-pi/4, pi/4]; the default two-argument form resolves
    the full half-turn (-pi/2, pi/2]. Pixels with S0 = 0 evaluate to 0 for every
    ratio-based kind, and S1 = S2 = 0 gives AoLP = 0.
    """
    kind = RepresentationKind.parse(kind)
    s0, s1, s2 = _check_stokes(s)

    if kind is RepresentationKind.AOLP:
        unpolarized = (s1 == 0) & (s2 == 0)
        if aolp_mode == "atan2":
            values = 0.5 * np.arctan2(s2, s1)
            # atan2(-0.0, x<0) = -pi; fold onto the closed end of the half-turn
            values = np.where(values <= -math.pi / 2, math.pi / 2, values)
        elif aolp_mode == "atan":
            with np.errstate(divide="ignore", invalid="ignore"):
                values = 0.5 * np.arctan(s2 / s1)
        else:
            raise InvalidInputError(f"unknown aolp_mode {aolp_mode!r}")
        values = np.where(unpolarized, 0.0, values)
    elif kind is RepresentationKind.DOLP:
        ratio, valid = _safe_ratio(np.sqrt(s1**2 + s2**2), s0)
        values = np.where(valid, np.clip(ratio, 0.0, 1.0), 0.0)
    elif kind is RepresentationKind.SAOLP:
        ratio, valid = _safe_ratio(s2, s0)
        values = np.where(valid, 0.5 * np.arcsin(np.clip(ratio, -1.0, 1.0)), 0.0)
    else:
        ratio, valid = _safe_ratio(s1, s0)
        values = np.where(valid, 0.5 * np.arccos(np.clip(ratio, -1.0, 1.0)), 0.0)
    return RepresentationMap(kind, values)


def luminance_stokes(s: StokesMap, weights=LUMA_WEIGHTS) -> StokesMap:
    """Collapse a 3-channel Stokes map to one channel with luma weights.

    Single-channel maps are returned unchanged (as H x W x 1).
    """
    comps = []
    for arr in (s.s0, s.s1, s.s2):
        arr = np.atleast_3d(arr)
        if arr.shape[2] == 3:
            arr = np.tensordot(arr, np.asarray(weights, dtype=np.float64), axes=([2], [0]))[..., None]
        comps.append(arr)
    return StokesMap(*comps)


def synthesize_polarized(intensity_unpol, intensity_pol, theta) -> PolarizedImageSet:
    """Render the four polarizer images for partially polarized light (Malus's law).

    Each angle image is ``I_u / 2 + I_p * cos^2(theta - a)``. Inputs broadcast
    against each other; ``theta`` is the polarization angle in radians.
    """
    iu = np.asarray(intensity_unpol, dtype=np.float64)
    ip = np.asarray(intensity_pol, dtype=np.float64)
    th = np.asarray(theta, dtype=np.float64)
    if np.any(iu < 0) or np.any(ip < 0):
        raise InvalidInputError("intensities must be non-negative")
    if not (np.all(np.isfinite(iu)) and np.all(np.isfinite(ip)) and np.all(np.isfinite(th))):
        raise InvalidInputError("synthesize_polarized inputs must be finite")
    iu, ip, th = np.broadcast_arrays(iu, ip, th)
    images = [iu / 2.0 + ip * np.cos(th - math.radians(a)) ** 2 for a in ANGLES_DEG]
    return PolarizedImageSet(*images)


def representation_to_unit(r: RepresentationMap) -> np.ndarray:
    """Min-max scale values to [0, 1] using the kind's declared range."""
    lo, hi = r.value_range
    return np.clip((np.asarray(r.values, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def to_uint8(unit: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(unit, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_representation(r: RepresentationMap, path) -> Path:
    """Write ``r`` as an 8-bit PNG (grayscale for C=1, RGB for C=3)."""
    values = np.asarray(r.values)
    if values.ndim == 3 and values.shape[2] == 1:
        values = values[..., 0]
    if values.ndim not in (2, 3):
        raise InvalidInputError(f"cannot export map of shape {values.shape}")
    img = to_uint8(representation_to_unit(RepresentationMap(r.kind, values)))
    path = Path(path)
    Image.fromarray(img).save(path, format="PNG")
    return path
