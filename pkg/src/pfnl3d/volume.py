"""Volumes, HU windowing, resampling, cropping and synthetic phantoms.

Axis convention throughout: arrays are indexed ``(z, y, x)`` with x
fastest, so ``dims == (d, h, w)``, ``spacing == (sz, sy, sx)`` in mm and
``origin == (z, y, x)`` in mm.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .autograd import interp_matrix

PHASES = ("noncontrast", "arterial", "portal_venous")
PHASE_ALIASES = {
    "nc": "noncontrast",
    "noncontrast": "noncontrast",
    "native": "noncontrast",
    "art": "arterial",
    "arterial": "arterial",
    "pv": "portal_venous",
    "portal_venous": "portal_venous",
    "portal-venous": "portal_venous",
}


def _triple(v, name: str, cast=float) -> tuple:
    t = tuple(cast(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"{name} must have 3 components, got {t}")
    return t


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable 3D scalar grid with physical geometry."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.array(self.data, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3-d array, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume intensities must be finite")
        arr.flags.writeable = False
        spacing = _triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    def same_geometry(self, other: "Volume") -> bool:
        return self.dims == other.dims and self.spacing == other.spacing and self.origin == other.origin

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing, self.origin)


@dataclass(frozen=True, eq=False)
class Mask(Volume):
    """Binary segmentation on a volume grid (values 0/1, stored as uint8)."""

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"mask data must be 3-d, got shape {arr.shape}")
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("mask values must be 0 or 1")
        arr = arr.astype(np.uint8, copy=True)
        arr.flags.writeable = False
        spacing = _triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    def with_data(self, data: np.ndarray) -> "Mask":
        return Mask(data, self.spacing, self.origin)


@dataclass(frozen=True)
class WindowSpec:
    level: float = 50.0
    width: float = 450.0

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"window width must be > 0, got {self.width}")

    @property
    def lower(self) -> float:
        return self.level - self.width / 2

    @property
    def upper(self) -> float:
        return self.level + self.width / 2


ABDOMEN_WINDOW = WindowSpec(50.0, 450.0)


def window_hu(v: Volume, w: WindowSpec = ABDOMEN_WINDOW) -> Volume:
    """Map HU to [0, 1]: ``clamp((x - (level - width/2)) / width, 0, 1)``."""
    x = v.data.astype(np.float64)
    out = np.clip((x - w.lower) / w.width, 0.0, 1.0)
    return v.with_data(out.astype(v.data.dtype if v.data.dtype == np.float32 else np.float64))


def resample_trilinear(
    v: Volume,
    dims: Sequence[int],
    spacing: Sequence[float],
    origin: Sequence[float],
) -> Volume:
    """Resample ``v`` onto the grid ``(dims, spacing, origin)``.

    Every output voxel center is mapped to physical space and linearly
    interpolated from ``v``; points outside ``v`` clamp to the edge.
    """
    dims = _triple(dims, "dims", int)
    spacing = _triple(spacing, "spacing")
    origin = _triple(origin, "origin")
    if min(dims) < 1 or min(spacing) <= 0:
        raise ValueError("target dims and spacing must be positive")
    if dims == v.dims and spacing == v.spacing and origin == v.origin:
        return Volume(v.data, spacing, origin)
    out = v.data.astype(np.float64)
    for ax in range(3):
        phys = origin[ax] + np.arange(dims[ax]) * spacing[ax]
        src = (phys - v.origin[ax]) / v.spacing[ax]
        m = interp_matrix(src, v.dims[ax])
        out = np.moveaxis(np.tensordot(out, m, axes=([ax], [1])), -1, ax)
    return Volume(out.astype(v.data.dtype), spacing, origin)


def resample_like(v: Volume, reference: Volume) -> Volume:
    return resample_trilinear(v, reference.dims, reference.spacing, reference.origin)


def crop(v: Volume, lo: Sequence[int], hi: Sequence[int]) -> Volume:
    """Sub-volume ``[lo, hi)``; the origin moves by ``lo * spacing``."""
    lo = _triple(lo, "lo", int)
    hi = _triple(hi, "hi", int)
    for ax in range(3):
        if not 0 <= lo[ax] < hi[ax] <= v.dims[ax]:
            raise IndexError(f"crop bounds {lo}..{hi} invalid for dims {v.dims}")
    data = v.data[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    origin = tuple(o + i * s for o, i, s in zip(v.origin, lo, v.spacing))
    return type(v)(data, v.spacing, origin)


# ---------------------------------------------------------------------------
# synthetic multiphase phantom

# (name, center (z, y, x) and radii as fractions of the volume, HU per phase
# (noncontrast, arterial, portal venous)). Arterial >= noncontrast for every
# structure, so the arterial phantom is always brighter on average.
_ORGANS = (
    ("liver", (0.45, 0.45, 0.30), (0.40, 0.22, 0.20), (55.0, 70.0, 115.0)),
    ("spleen", (0.45, 0.45, 0.76), (0.25, 0.12, 0.09), (45.0, 95.0, 120.0)),
    ("kidney_r", (0.62, 0.64, 0.30), (0.18, 0.08, 0.07), (30.0, 185.0, 160.0)),
    ("kidney_l", (0.62, 0.64, 0.70), (0.18, 0.08, 0.07), (30.0, 185.0, 160.0)),
    ("pancreas", (0.55, 0.50, 0.55), (0.10, 0.05, 0.18), (40.0, 115.0, 100.0)),
    ("portal_vein", (0.45, 0.52, 0.42), (0.22, 0.04, 0.04), (40.0, 70.0, 185.0)),
    ("aorta", (0.50, 0.62, 0.52), (0.60, 0.05, 0.05), (40.0, 320.0, 165.0)),
    ("vertebra", (0.50, 0.76, 0.50), (0.60, 0.08, 0.09), (420.0, 420.0, 420.0)),
)


def make_phantom(
    seed: int,
    dims: Sequence[int] = (48, 48, 48),
    phase: str = "portal_venous",
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    window: WindowSpec = ABDOMEN_WINDOW,
) -> Volume:
    """Deterministic abdomen-like phantom, windowed to [0, 1].

    Geometry (body outline, organ ellipsoids, parenchymal texture) depends
    only on ``seed``; ``phase`` changes the organ enhancement levels.
    """
    if isinstance(dims, (int, np.integer)):
        dims = (int(dims),) * 3
    dims = _triple(dims, "dims", int)
    if min(dims) < 16:
        raise ValueError(f"phantom dims must be >= 16 per axis, got {dims}")
    try:
        phase_idx = PHASES.index(PHASE_ALIASES[phase])
    except KeyError:
        raise ValueError(f"unknown phase {phase!r}; expected one of {sorted(PHASE_ALIASES)}") from None

    rng = np.random.Generator(np.random.Philox(int(seed)))
    d, h, w = dims
    z, y, x = np.meshgrid(
        (np.arange(d) + 0.5) / d, (np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij"
    )

    hu = np.full(dims, -1000.0)
    body_r = np.array([0.44, 0.47]) * (1 + rng.uniform(-0.04, 0.04, size=2))
    body = ((y - 0.5) / body_r[0]) ** 2 + ((x - 0.5) / body_r[1]) ** 2
    hu[body <= 1.0] = -100.0  # subcutaneous fat
    inner = body <= 0.80
    hu[inner] = 40.0  # soft tissue / muscle

    # low-frequency background field, identical across phases
    field_lo = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=max(dims) / 8, mode="nearest")
    field_lo *= 12.0 / max(field_lo.std(), 1e-12)
    hu[inner] += field_lo[inner]

    for _name, center, radii, levels in _ORGANS:
        c = np.array(center) + rng.uniform(-0.03, 0.03, size=3)
        r = np.array(radii) * (1 + rng.uniform(-0.12, 0.12, size=3))
        ell = ((z - c[0]) / r[0]) ** 2 + ((y - c[1]) / r[1]) ** 2 + ((x - c[2]) / r[2]) ** 2
        hu[(ell <= 1.0) & inner] = levels[phase_idx]

    # fine parenchymal texture (anatomical, so phase independent)
    tex = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=0.8, mode="nearest")
    tex *= 10.0 / max(tex.std(), 1e-12)
    hu[body <= 1.0] += tex[body <= 1.0]

    # partial-volume smoothing of tissue boundaries
    hu = ndimage.gaussian_filter(hu, sigma=0.6, mode="nearest")
    vol = Volume(hu.astype(np.float32), spacing, (0.0, 0.0, 0.0))
    return window_hu(vol, window)
