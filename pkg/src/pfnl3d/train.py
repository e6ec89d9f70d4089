"""Patch sampling, rotation augmentation and the training loop."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import Tensor, backward
from .degrade import degrade_second_order
from .loss import DEFAULT_LAMBDA_EDGE, combined_loss
from .metrics import psnr, ssim3d
from .model import Checkpoint, PfnlConfig, enhance, forward, init_params, save_checkpoint
from .nifti import read_nifti
from .optim import AdamState, adam_step
from .volume import PHASES, make_phantom

log = logging.getLogger(__name__)

LOSS_LOG_HEADER = ("epoch", "step", "loss", "edge_term", "intensity_term")
EPOCH_LOG_HEADER = ("epoch", "mean_loss", "val_psnr", "val_ssim")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 50
    steps_per_epoch: int = 32
    max_steps: int = 0  # 0 = no cap
    batch_size: int = 2
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    lambda_edge: float = DEFAULT_LAMBDA_EDGE
    patch: int = 16
    scale: int = 2
    channels: int = 16
    n_pfrb: int = 4
    nonlocal_max_positions: int = 4096
    augment: bool = True
    data_dir: str = ""
    out_dir: str = ""
    checkpoint_every: int = 0  # epochs; 0 = only best/final
    data_seed: int = 0
    n_train_cases: int = 1
    n_val_cases: int = 1
    phantom_dims: int = 48

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        for b in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, b) < 1.0:
                raise ValueError(f"{b} must lie in [0, 1), got {getattr(self, b)}")
        if self.eps_adam <= 0:
            raise ValueError("eps_adam must be > 0")
        if self.lambda_edge < 0:
            raise ValueError("lambda_edge must be >= 0")
        for k in ("epochs", "steps_per_epoch", "batch_size", "patch", "n_train_cases", "phantom_dims"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1, got {getattr(self, k)}")
        for k in ("max_steps", "checkpoint_every", "n_val_cases"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0, got {getattr(self, k)}")
        if not self.data_dir and self.patch * self.scale > self.phantom_dims:
            raise ValueError(f"patch*scale = {self.patch * self.scale} exceeds phantom_dims {self.phantom_dims}")

    @property
    def model(self) -> PfnlConfig:
        return PfnlConfig(
            n_phases=len(PHASES),
            channels=self.channels,
            n_pfrb=self.n_pfrb,
            scale=self.scale,
            nonlocal_max_positions=self.nonlocal_max_positions,
        )

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{f.name}={v}")
        return "\n".join(out) + "\n"


DESK_PRESET = TrainConfig()
FULL_PRESET = TrainConfig(epochs=1000, batch_size=8)


def _coerce(name: str, typ, raw: str):
    if typ is bool or typ == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if typ is int or typ == "int":
        return int(raw)
    if typ is float or typ == "float":
        return float(raw)
    return raw


def parse_config_text(text: str, base: TrainConfig = DESK_PRESET) -> TrainConfig:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    updates = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {n}: unknown key {key!r}")
        try:
            updates[key] = _coerce(key, types[key], raw)
        except ValueError as e:
            raise ValueError(f"config line {n}: {e}") from None
    return replace(base, **updates)


def parse_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


# ---------------------------------------------------------------------------
# data


@dataclass
class Case:
    """Three low-resolution phases (nc, art, pv) and the high-resolution PV reference."""

    name: str
    phases: tuple[np.ndarray, np.ndarray, np.ndarray]
    reference: np.ndarray

    @property
    def scale(self) -> int:
        return self.reference.shape[0] // self.phases[0].shape[0]


def _degrade_seed(case_seed: int, phase_idx: int) -> int:
    return int(np.random.SeedSequence([int(case_seed), phase_idx]).generate_state(1, dtype=np.uint64)[0] >> 1)


def make_phantom_case(seed: int, dims: int = 48, scale: int = 2) -> Case:
    """Phantom in all three phases, each degraded with its own seed."""
    vols = [make_phantom(seed, dims, ph) for ph in PHASES]
    lr = tuple(degrade_second_order(v, _degrade_seed(seed, i), scale)[0].data.astype(np.float32) for i, v in enumerate(vols))
    return Case(f"phantom{seed}", lr, vols[-1].data.astype(np.float32))


def load_case_dir(path) -> Case:
    """Case directory holding ``nc.nii``, ``art.nii``, ``pv.nii`` (low-res) and ``ref.nii``."""
    path = Path(path)
    phases = tuple(read_nifti(path / f"{n}.nii", kind="volume").data.astype(np.float32) for n in ("nc", "art", "pv"))
    ref = read_nifti(path / "ref.nii", kind="volume").data.astype(np.float32)
    return Case(path.name, phases, ref)


def load_cases(cfg: TrainConfig) -> tuple[list[Case], list[Case]]:
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        train = [load_case_dir(p) for p in sorted((root / "train").iterdir()) if p.is_dir()]
        val_root = root / "val"
        val = [load_case_dir(p) for p in sorted(val_root.iterdir()) if p.is_dir()] if val_root.is_dir() else []
        return train, val
    train = [make_phantom_case(cfg.data_seed + i, cfg.phantom_dims, cfg.scale) for i in range(cfg.n_train_cases)]
    val = [make_phantom_case(cfg.data_seed + 10_000 + i, cfg.phantom_dims, cfg.scale) for i in range(cfg.n_val_cases)]
    return train, val


def sample_patch_triplet(case: Case, patch: int, scale: int, rng: np.random.Generator, corner=None):
    """Random aligned LR patches of every phase and the matching HR patch.

    Returns ``(lr_patches, hr_patch, lr_corner)``; the HR corner is the LR
    corner times ``scale``.
    """
    lr_dims = case.phases[0].shape
    for p in case.phases[1:]:
        if p.shape != lr_dims:
            raise ValueError("phase volumes are not spatially aligned")
    if any(patch > n for n in lr_dims):
        raise ValueError(f"patch {patch} exceeds low-resolution dims {lr_dims}")
    if tuple(scale * n for n in lr_dims) != case.reference.shape:
        raise ValueError(f"reference dims {case.reference.shape} != {scale} x {lr_dims}")
    if corner is None:
        corner = tuple(int(rng.integers(0, n - patch + 1)) for n in lr_dims)
    cz, cy, cx = corner
    lr = tuple(np.ascontiguousarray(p[cz : cz + patch, cy : cy + patch, cx : cx + patch]) for p in case.phases)
    hz, hy, hx, hp = cz * scale, cy * scale, cx * scale, patch * scale
    hr = np.ascontiguousarray(case.reference[hz : hz + hp, hy : hy + hp, hx : hx + hp])
    return lr, hr, corner


def augment_rotate(patches: Sequence[np.ndarray], rng: np.random.Generator | None = None, k: int | None = None):
    """Rotate every patch by the same multiple of 90 degrees about the z axis."""
    if k is None:
        k = int(rng.integers(0, 4))
    out = []
    for p in patches:
        if p.shape[-1] != p.shape[-2]:
            raise ValueError(f"in-plane patch extents must match, got {p.shape}")
        out.append(np.ascontiguousarray(np.rot90(p, k, axes=(-2, -1))))
    return out, k


def baseline_upsample(case: Case, scale: int) -> np.ndarray:
    from .autograd import trilinear_upsample

    return trilinear_upsample(Tensor(case.phases[-1][None, None]), scale).data[0, 0]


def validate(params, model_cfg: PfnlConfig, cases: Sequence[Case]) -> tuple[float, float]:
    """Mean PSNR and SSIM of whole-volume enhancement against the references."""
    if not cases:
        return math.nan, math.nan
    ps, ss = [], []
    for c in cases:
        out = enhance(params, model_cfg, *c.phases)
        ps.append(psnr(c.reference, out))
        ss.append(ssim3d(c.reference, out))
    return float(np.mean(ps)), float(np.mean(ss))


# ---------------------------------------------------------------------------
# loop


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_log: list[tuple] = field(default_factory=list)
    epoch_log: list[tuple] = field(default_factory=list)
    best_val_psnr: float = -math.inf


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _batch(cases, cfg: TrainConfig, rng) -> tuple[list[Tensor], Tensor]:
    xs = [[] for _ in PHASES]
    ys = []
    for _ in range(cfg.batch_size):
        case = cases[int(rng.integers(0, len(cases)))]
        lr, hr, _ = sample_patch_triplet(case, cfg.patch, cfg.scale, rng)
        if cfg.augment:
            rotated, _ = augment_rotate([*lr, hr], rng)
            lr, hr = rotated[:-1], rotated[-1]
        for i, p in enumerate(lr):
            xs[i].append(p)
        ys.append(hr)
    return [Tensor(np.stack(x)[:, None]) for x in xs], Tensor(np.stack(ys)[:, None])


def train(
    cfg: TrainConfig,
    cases: Sequence[Case],
    val_cases: Sequence[Case] = (),
    out_dir: str | os.PathLike | None = None,
) -> TrainResult:
    """Adam training of the restoration network on random patches.

    An epoch is ``steps_per_epoch`` optimization steps; ``max_steps`` stops
    early. With ``out_dir`` set, ``loss_log.csv``, ``epoch_log.csv`` and
    checkpoints (``best.pfnl``, ``final.pfnl``, ``epoch{N}.pfnl``) are written.
    """
    if not cases:
        raise ValueError("training needs at least one case")
    out = Path(out_dir) if out_dir else (Path(cfg.out_dir) if cfg.out_dir else None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model_cfg = cfg.model
    rng = np.random.Generator(np.random.Philox(int(cfg.seed)))
    params = init_params(model_cfg, cfg.seed)
    state = AdamState.zeros_like(params)
    result = TrainResult(Checkpoint(model_cfg, params, 0, state))
    step = 0
    done = False
    for epoch in range(1, cfg.epochs + 1):
        epoch_losses = []
        for _ in range(cfg.steps_per_epoch):
            step += 1
            inputs, target = _batch(cases, cfg, rng)
            pred = forward(params, model_cfg, *inputs)
            loss, intensity, edge = combined_loss(target, pred, cfg.lambda_edge, return_terms=True)
            value = float(loss.data)
            if not math.isfinite(value):
                if out is not None:
                    save_checkpoint(Checkpoint(model_cfg, params, step, state), out / "diagnostic.pfnl")
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            backward(loss)
            adam_step(params, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
            result.loss_log.append((epoch, step, value, edge, intensity))
            epoch_losses.append(value)
            log.debug("epoch %d step %d loss %.6f", epoch, step, value)
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
        val_psnr, val_ssim = validate(params, model_cfg, val_cases)
        result.epoch_log.append((epoch, float(np.mean(epoch_losses)), val_psnr, val_ssim))
        log.info("epoch %d mean loss %.5f val psnr %.3f", epoch, np.mean(epoch_losses), val_psnr)
        result.checkpoint = Checkpoint(model_cfg, params, step, state)
        if out is not None:
            if val_cases and val_psnr > result.best_val_psnr:
                save_checkpoint(result.checkpoint, out / "best.pfnl")
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(result.checkpoint, out / f"epoch{epoch}.pfnl")
        if val_cases and val_psnr > result.best_val_psnr:
            result.best_val_psnr = val_psnr
        if done:
            break
    if out is not None:
        save_checkpoint(result.checkpoint, out / "final.pfnl")
        _write_csv(out / "loss_log.csv", LOSS_LOG_HEADER, result.loss_log)
        _write_csv(out / "epoch_log.csv", EPOCH_LOG_HEADER, result.epoch_log)
        (out / "train_config.txt").write_text(cfg.to_text(), encoding="utf-8")
    return result
