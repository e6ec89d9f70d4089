"""Seeded second-order degradation of windowed volumes.

Each of the two stages runs, in fixed order, an optional blur, an optional
resize and an optional noise op. Every random draw is recorded in a
:class:`DegradationRecipe`, which can be replayed on the same input to
reproduce the degraded volume bit for bit.

Random numbers come from numpy's Philox counter-based generator. Per stage
the draw order is::

    u_blur, [blur kind, sigma(s)], u_resize, [scale], u_noise, [kind, strength, noise seed]

where bracketed draws only happen when the preceding uniform selects the op.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .autograd import interp_matrix
from .volume import Volume

GENERATOR = "philox"
RECIPE_FORMAT = "pfnl3d-recipe/1"


@dataclass(frozen=True)
class BlurKernel:
    kind: str
    sigmas: tuple[float, float, float]
    radius: int
    factors: tuple[np.ndarray, np.ndarray, np.ndarray] = field(repr=False, compare=False)

    @property
    def weights(self) -> np.ndarray:
        fz, fy, fx = self.factors
        return fz[:, None, None] * fy[None, :, None] * fx[None, None, :]

    @property
    def extent(self) -> int:
        return 2 * self.radius + 1


def gaussian_kernel_3d(sigmas: Sequence[float], radius: int | None = None) -> BlurKernel:
    """Separable sampled Gaussian normalized to unit sum.

    ``radius`` defaults to ``ceil(3 * max(sigmas))``.
    """
    sigmas = tuple(float(s) for s in sigmas)
    if len(sigmas) != 3 or min(sigmas) <= 0:
        raise ValueError(f"sigmas must be three positive values, got {sigmas}")
    if radius is None:
        radius = int(math.ceil(3 * max(sigmas)))
    radius = int(radius)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    factors = []
    for s in sigmas:
        f = np.exp(-0.5 * (t / s) ** 2)
        factors.append(f / f.sum())
    kind = "isotropic" if sigmas[0] == sigmas[1] == sigmas[2] else "anisotropic"
    return BlurKernel(kind, sigmas, radius, tuple(factors))


def apply_blur(v: Volume, k: BlurKernel) -> Volume:
    """Separable convolution with clamp-to-edge borders."""
    if k.extent > min(v.dims):
        raise ValueError(f"kernel extent {k.extent} exceeds volume dims {v.dims}")
    out = v.data.astype(np.float64)
    for ax, f in enumerate(k.factors):
        out = ndimage.correlate1d(out, f, axis=ax, mode="nearest")
    return v.with_data(out.astype(v.data.dtype))


def add_noise(v: Volume, kind: str, strength: float, seed: int) -> Volume:
    """Gaussian (``strength`` = sigma) or Poisson (``strength`` = photon scale) noise.

    The result is clamped to [0, 1]. A Gaussian sigma of 0 is the identity.
    """
    rng = np.random.Generator(np.random.Philox(int(seed)))
    x = v.data.astype(np.float64)
    if kind == "gaussian":
        if strength < 0:
            raise ValueError("gaussian sigma must be >= 0")
        if strength == 0:
            return v
        noisy = x + rng.normal(0.0, strength, size=x.shape)
    elif kind == "poisson":
        if strength <= 0:
            raise ValueError("poisson photon scale must be > 0")
        noisy = rng.poisson(np.clip(x, 0.0, None) * strength) / strength
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return v.with_data(np.clip(noisy, 0.0, 1.0).astype(v.data.dtype))


def _resize_axis_matrix(n_in: int, n_out: int, method: str) -> np.ndarray:
    o = np.arange(n_out, dtype=np.float64)
    src = (o + 0.5) * (n_in / n_out) - 0.5
    if method == "trilinear":
        return interp_matrix(src, n_in)
    if method == "nearest":
        idx = np.clip(np.floor((o + 0.5) * (n_in / n_out)).astype(np.int64), 0, n_in - 1)
        m = np.zeros((n_out, n_in))
        m[np.arange(n_out), idx] = 1.0
        return m
    raise ValueError(f"unknown resize method {method!r}")


def resize_to(v: Volume, dims: Sequence[int], method: str = "trilinear") -> Volume:
    """Resize to explicit dims, keeping the physical extent of the grid."""
    dims = tuple(int(d) for d in dims)
    if min(dims) < 1:
        raise ValueError(f"degenerate output dims {dims}")
    if dims == v.dims:
        return v
    out = v.data.astype(np.float64)
    spacing, origin = [], []
    for ax in range(3):
        n_in, n_out = v.dims[ax], dims[ax]
        if n_in != n_out:
            m = _resize_axis_matrix(n_in, n_out, method)
            out = np.moveaxis(np.tensordot(out, m, axes=([ax], [1])), -1, ax)
        sp = v.spacing[ax] * n_in / n_out
        spacing.append(sp)
        origin.append(v.origin[ax] - v.spacing[ax] / 2 + sp / 2)
    return Volume(out.astype(v.data.dtype), tuple(spacing), tuple(origin))


def resize_volume(v: Volume, scale: float, method: str = "trilinear") -> Volume:
    """Scale dims by ``scale`` (floored); spacing is divided by ``scale``."""
    if scale <= 0:
        raise ValueError("scale must be > 0")
    dims = tuple(int(math.floor(n * scale + 1e-9)) for n in v.dims)
    if min(dims) < 1:
        raise ValueError(f"scale {scale} gives degenerate dims {dims}")
    if dims == v.dims:
        return v
    out = resize_to(v, dims, method)
    spacing = tuple(s / scale for s in v.spacing)
    origin = tuple(o - s / 2 + sp / 2 for o, s, sp in zip(v.origin, v.spacing, spacing))
    return Volume(out.data, spacing, origin)


# ---------------------------------------------------------------------------
# recipe


@dataclass(frozen=True)
class DegradeConfig:
    """Apply-probabilities and sampling ranges of the degradation model."""

    p_blur: float = 0.8
    p_resize: float = 0.7
    p_noise: float = 0.9
    blur_sigma: tuple[float, float] = (0.2, 2.0)
    p_anisotropic: float = 0.5
    gaussian_sigma: tuple[float, float] = (0.005, 0.05)
    poisson_scale: tuple[float, float] = (200.0, 4000.0)
    p_poisson: float = 0.5
    resize_scale: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        for name in ("p_blur", "p_resize", "p_noise", "p_anisotropic", "p_poisson"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        for name in ("blur_sigma", "gaussian_sigma", "poisson_scale", "resize_scale"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} range must satisfy 0 < lo <= hi, got {(lo, hi)}")


@dataclass
class StageOps:
    blur: str | None = None  # "isotropic" | "anisotropic"
    blur_sigmas: tuple[float, float, float] | None = None
    blur_radius: int | None = None
    resize_scale: float | None = None
    noise: str | None = None  # "gaussian" | "poisson"
    noise_strength: float | None = None
    noise_seed: int | None = None

    @property
    def resize_direction(self) -> str | None:
        if self.resize_scale is None:
            return None
        return "up" if self.resize_scale > 1 else ("down" if self.resize_scale < 1 else "keep")


@dataclass
class DegradationRecipe:
    seed: int
    final_scale: int
    input_dims: tuple[int, int, int]
    stages: list[StageOps]
    generator: str = GENERATOR

    def to_text(self) -> str:
        lines = [
            f"format={RECIPE_FORMAT}",
            f"generator={self.generator}",
            f"seed={self.seed}",
            f"final_scale={self.final_scale}",
            "input_dims=" + ",".join(str(d) for d in self.input_dims),
        ]
        for i, st in enumerate(self.stages, start=1):
            p = f"stage{i}."
            lines.append(p + f"blur={st.blur or 'none'}")
            if st.blur:
                lines.append(p + "blur.sigmas=" + ",".join(repr(s) for s in st.blur_sigmas))
                lines.append(p + f"blur.radius={st.blur_radius}")
            lines.append(p + f"resize={'none' if st.resize_scale is None else st.resize_direction}")
            if st.resize_scale is not None:
                lines.append(p + f"resize.scale={st.resize_scale!r}")
                lines.append(p + "resize.method=trilinear")
            lines.append(p + f"noise={st.noise or 'none'}")
            if st.noise:
                lines.append(p + f"noise.strength={st.noise_strength!r}")
                lines.append(p + f"noise.seed={st.noise_seed}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DegradationRecipe":
        kv: dict[str, str] = {}
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"recipe line {n}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        if kv.get("format") != RECIPE_FORMAT:
            raise ValueError(f"unsupported recipe format {kv.get('format')!r}")
        stages = []
        for i in (1, 2):
            p = f"stage{i}."
            st = StageOps()
            if kv[p + "blur"] != "none":
                st.blur = kv[p + "blur"]
                st.blur_sigmas = tuple(float(s) for s in kv[p + "blur.sigmas"].split(","))
                st.blur_radius = int(kv[p + "blur.radius"])
            if kv[p + "resize"] != "none":
                st.resize_scale = float(kv[p + "resize.scale"])
            if kv[p + "noise"] != "none":
                st.noise = kv[p + "noise"]
                st.noise_strength = float(kv[p + "noise.strength"])
                st.noise_seed = int(kv[p + "noise.seed"])
            stages.append(st)
        return cls(
            seed=int(kv["seed"]),
            final_scale=int(kv["final_scale"]),
            input_dims=tuple(int(d) for d in kv["input_dims"].split(",")),
            stages=stages,
            generator=kv.get("generator", GENERATOR),
        )


def _fit_radius(sigmas, dims) -> int:
    r = int(math.ceil(3 * max(sigmas)))
    return max(0, min(r, (min(dims) - 1) // 2))


def _sample_stage(rng: np.random.Generator, cfg: DegradeConfig, dims) -> tuple[StageOps, tuple]:
    st = StageOps()
    if rng.uniform() < cfg.p_blur:
        if rng.uniform() < cfg.p_anisotropic:
            st.blur = "anisotropic"
            st.blur_sigmas = tuple(float(s) for s in rng.uniform(*cfg.blur_sigma, size=3))
        else:
            st.blur = "isotropic"
            s = float(rng.uniform(*cfg.blur_sigma))
            st.blur_sigmas = (s, s, s)
        st.blur_radius = _fit_radius(st.blur_sigmas, dims)
    if rng.uniform() < cfg.p_resize:
        st.resize_scale = float(rng.uniform(*cfg.resize_scale))
        dims = tuple(max(1, int(math.floor(n * st.resize_scale + 1e-9))) for n in dims)
    if rng.uniform() < cfg.p_noise:
        if rng.uniform() < cfg.p_poisson:
            st.noise = "poisson"
            st.noise_strength = float(rng.uniform(*cfg.poisson_scale))
        else:
            st.noise = "gaussian"
            st.noise_strength = float(rng.uniform(*cfg.gaussian_sigma))
        st.noise_seed = int(rng.integers(0, 2**63 - 1))
    return st, dims


def _final_dims(dims, final_scale: int) -> tuple[int, int, int]:
    return tuple(-(-n // final_scale) for n in dims)


def apply_recipe(v: Volume, recipe: DegradationRecipe) -> Volume:
    """Replay the recorded degradation on ``v``."""
    if tuple(v.dims) != tuple(recipe.input_dims):
        raise ValueError(f"recipe was sampled for dims {recipe.input_dims}, volume has {v.dims}")
    out = v
    for st in recipe.stages:
        if st.blur:
            k = gaussian_kernel_3d(st.blur_sigmas, st.blur_radius)
            out = apply_blur(out, k)
        if st.resize_scale is not None:
            out = resize_volume(out, st.resize_scale)
        if st.noise:
            out = add_noise(out, st.noise, st.noise_strength, st.noise_seed)
    target = _final_dims(v.dims, recipe.final_scale)
    out = resize_to(out, target)
    if target == v.dims:
        return v.with_data(np.clip(out.data, 0.0, 1.0))
    # geometry of the final grid is defined relative to the input grid
    spacing = tuple(s * n / t for s, n, t in zip(v.spacing, v.dims, target))
    origin = tuple(o - s / 2 + sp / 2 for o, s, sp in zip(v.origin, v.spacing, spacing))
    data = np.clip(out.data, 0.0, 1.0)
    return Volume(data, spacing, origin)


def degrade_second_order(
    v: Volume,
    seed: int,
    final_scale: int = 4,
    config: DegradeConfig | None = None,
) -> tuple[Volume, DegradationRecipe]:
    """Two-stage random blur/resize/noise, ending at ``ceil(dims / final_scale)``."""
    cfg = config or DegradeConfig()
    if final_scale not in (1, 2, 4):
        raise ValueError(f"final_scale must be 1, 2 or 4, got {final_scale}")
    if min(v.dims) < 2 * final_scale:
        raise ValueError(f"volume {v.dims} too small for final_scale {final_scale}")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    dims = v.dims
    stages = []
    for _ in range(2):
        st, dims = _sample_stage(rng, cfg, dims)
        stages.append(st)
    recipe = DegradationRecipe(int(seed), int(final_scale), v.dims, stages)
    return apply_recipe(v, recipe), recipe
