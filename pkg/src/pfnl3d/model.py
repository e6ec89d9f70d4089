"""3D progressive-fusion non-local (PFNL) restoration network.

The network maps three co-registered low-resolution phase volumes
(non-contrast, arterial, portal venous) to one portal venous volume at
``scale`` times the resolution:

1. non-local attention over the channel-stacked phases (residual);
2. a 3x3x3 conv shared by all phases lifts each phase to ``channels`` features;
3. ``n_pfrb`` progressive fusion residual blocks exchange a distilled shared
   representation between the phase branches;
4. branches are merged by a 1x1x1 conv to ``channels * scale**3`` features,
   voxel-shuffled to the output grid and projected to one channel;
5. the trilinearly upsampled portal venous input is added (global skip).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .autograd import (
    ParamStore,
    Tensor,
    add,
    concat_channels,
    conv3d,
    leaky_relu,
    no_grad,
    nonlocal_attention,
    resize_trilinear,
    split_channels,
    subsample,
    trilinear_upsample,
    voxel_shuffle,
)
from .optim import AdamState

CHECKPOINT_MAGIC = b"PFNL3D\x00\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PfnlConfig:
    n_phases: int = 3
    channels: int = 16
    n_pfrb: int = 4
    scale: int = 4
    nonlocal_max_positions: int = 4096

    def __post_init__(self):
        if self.n_phases < 1:
            raise ValueError("n_phases must be >= 1")
        if self.channels < 4:
            raise ValueError(f"channels must be >= 4, got {self.channels}")
        if self.n_pfrb < 1:
            raise ValueError(f"n_pfrb must be >= 1, got {self.n_pfrb}")
        if self.scale not in (1, 2, 4):
            raise ValueError(f"scale must be 1, 2 or 4, got {self.scale}")
        if self.nonlocal_max_positions < 1:
            raise ValueError("nonlocal_max_positions must be >= 1")

    @property
    def attention_channels(self) -> int:
        return self.n_phases


def param_shapes(cfg: PfnlConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of all parameters, in canonical order."""
    n, c, s = cfg.n_phases, cfg.channels, cfg.scale
    k = cfg.attention_channels
    shapes: dict[str, tuple[int, ...]] = {}
    for proj in ("theta", "phi", "g"):
        shapes[f"nonlocal.{proj}.w"] = (k, n, 1, 1, 1)
        shapes[f"nonlocal.{proj}.b"] = (k,)
    shapes["nonlocal.out.w"] = (n, k, 1, 1, 1)
    shapes["nonlocal.out.b"] = (n,)
    shapes["head.w"] = (c, 1, 3, 3, 3)
    shapes["head.b"] = (c,)
    for blk in range(cfg.n_pfrb):
        p = f"pfrb{blk}."
        for i in range(n):
            shapes[p + f"conv1.{i}.w"] = (c, c, 3, 3, 3)
            shapes[p + f"conv1.{i}.b"] = (c,)
        shapes[p + "distill.w"] = (c, n * c, 1, 1, 1)
        shapes[p + "distill.b"] = (c,)
        for i in range(n):
            shapes[p + f"conv2.{i}.w"] = (c, 2 * c, 3, 3, 3)
            shapes[p + f"conv2.{i}.b"] = (c,)
    shapes["merge.w"] = (c * s**3, n * c, 1, 1, 1)
    shapes["merge.b"] = (c * s**3,)
    shapes["tail.w"] = (1, c, 3, 3, 3)
    shapes["tail.b"] = (1,)
    return shapes


# convs at the end of a residual branch start scaled down so the untrained
# network begins close to its skip connection
_RESIDUAL_INIT_SCALE = 0.1


def init_params(cfg: PfnlConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
    rng = np.random.Generator(np.random.Philox(int(seed)))
    params = ParamStore()
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
            if ".conv2." in name or name.startswith(("tail.", "nonlocal.out.")):
                arr *= _RESIDUAL_INIT_SCALE
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


def zero_params(cfg: PfnlConfig, dtype=np.float32) -> ParamStore:
    params = ParamStore()
    for name, shape in param_shapes(cfg).items():
        params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
    return params


def attention_stride(dims: Sequence[int], budget: int) -> int:
    """Smallest integer stride bringing the position count under ``budget``."""
    s = 1
    while math.prod(-(-d // s) for d in dims) > budget:
        s += 1
    return s


def _attention(params: ParamStore, cfg: PfnlConfig, x: Tensor) -> Tensor:
    names = ("theta.w", "theta.b", "phi.w", "phi.b", "g.w", "g.b", "out.w", "out.b")
    weights = [params["nonlocal." + n] for n in names]
    dims = x.shape[2:]
    s = attention_stride(dims, cfg.nonlocal_max_positions)
    if s == 1:
        return nonlocal_attention(x, *weights, max_positions=cfg.nonlocal_max_positions)
    z = nonlocal_attention(subsample(x, s), *weights, max_positions=cfg.nonlocal_max_positions, residual=False)
    return add(x, resize_trilinear(z, dims))


def _conv(params: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return conv3d(x, params[prefix + ".w"], params[prefix + ".b"])


def _pfrb(params: ParamStore, prefix: str, branches: list[Tensor]) -> list[Tensor]:
    feats = [leaky_relu(_conv(params, f"{prefix}conv1.{i}", b)) for i, b in enumerate(branches)]
    distilled = leaky_relu(_conv(params, prefix + "distill", concat_channels(feats)))
    out = []
    for i, (b, f) in enumerate(zip(branches, feats)):
        r = leaky_relu(_conv(params, f"{prefix}conv2.{i}", concat_channels([distilled, f])))
        out.append(add(b, r))
    return out


def _check_inputs(cfg: PfnlConfig, phases: Sequence[Tensor]) -> None:
    if len(phases) != cfg.n_phases:
        raise ValueError(f"expected {cfg.n_phases} phase inputs, got {len(phases)}")
    shape = phases[0].shape
    if len(shape) != 5 or shape[1] != 1:
        raise ValueError(f"phase inputs must have shape (b, 1, d, h, w), got {shape}")
    for p in phases[1:]:
        if p.shape != shape:
            raise ValueError(f"phase input shapes differ: {p.shape} vs {shape}")


def residual_body(params: ParamStore, cfg: PfnlConfig, *phases: Tensor) -> Tensor:
    """Everything except the global skip: a (b, 1, s*d, s*h, s*w) correction."""
    _check_inputs(cfg, phases)
    n = cfg.n_phases
    att = _attention(params, cfg, concat_channels(list(phases)))
    branches = [leaky_relu(_conv(params, "head", p)) for p in split_channels(att, [1] * n)]
    for blk in range(cfg.n_pfrb):
        branches = _pfrb(params, f"pfrb{blk}.", branches)
    merged = leaky_relu(_conv(params, "merge", concat_channels(branches)))
    up = voxel_shuffle(merged, cfg.scale)
    return _conv(params, "tail", up)


def forward(params: ParamStore, cfg: PfnlConfig, *phases: Tensor) -> Tensor:
    """Restore the last phase (portal venous) from all phases.

    ``phases`` are ``(b, 1, d, h, w)`` tensors ordered non-contrast,
    arterial, portal venous. Output has shape ``(b, 1, s*d, s*h, s*w)``.
    """
    body = residual_body(params, cfg, *phases)
    return add(body, trilinear_upsample(phases[-1], cfg.scale))


def _tile_starts(n: int, t: int) -> list[int]:
    if n <= t:
        return [0]
    starts = list(range(0, n - t + 1, t))
    if starts[-1] != n - t:
        starts.append(n - t)
    return starts


def enhance(params: ParamStore, cfg: PfnlConfig, *phases: np.ndarray, tile: int | None = None) -> np.ndarray:
    """Inference on whole volumes of shape (d, h, w) or (b, 1, d, h, w).

    The residual body runs on tiles whose attention fits the position budget;
    the global skip is computed on the full volume so tiling never changes
    the upsampled baseline.
    """
    arrays = [np.asarray(p, dtype=np.float32) for p in phases]
    squeeze = arrays[0].ndim == 3
    if squeeze:
        arrays = [a[None, None] for a in arrays]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"phase volumes differ in shape: {a.shape} vs {shape}")
    s = cfg.scale
    dims = shape[2:]
    if tile is None:
        tile = max(1, int(math.floor(cfg.nonlocal_max_positions ** (1 / 3) + 1e-9)))
    with no_grad():
        skip = trilinear_upsample(Tensor(arrays[-1]), s).data
        if math.prod(dims) <= cfg.nonlocal_max_positions:
            body = residual_body(params, cfg, *[Tensor(a) for a in arrays]).data
        else:
            body = np.zeros_like(skip)
            for z0 in _tile_starts(dims[0], tile):
                for y0 in _tile_starts(dims[1], tile):
                    for x0 in _tile_starts(dims[2], tile):
                        sl = (slice(None), slice(None), slice(z0, z0 + tile), slice(y0, y0 + tile), slice(x0, x0 + tile))
                        res = residual_body(params, cfg, *[Tensor(np.ascontiguousarray(a[sl])) for a in arrays]).data
                        hz, hy, hx = res.shape[2:]
                        body[:, :, z0 * s : z0 * s + hz, y0 * s : y0 * s + hy, x0 * s : x0 * s + hx] = res
        out = skip + body
    return out[0, 0] if squeeze else out


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: PfnlConfig
    params: ParamStore
    step: int = 0
    optimizer: AdamState | None = None
    version: int = CHECKPOINT_VERSION


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    parts = [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<H")
        try:
            name = self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"corrupt tensor name at offset {self.pos}") from e
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}Q")
        count = math.prod(shape)
        data = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        return name, data


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout::

        magic "PFNL3D\\0\\0" | u32 version | u32 x5 config | u32 tensor count
        | tensors (u16 name len, name, u8 ndim, u64 extents, f32 data)
        | u64 step | u8 has_optimizer [ | u64 adam t | u32 count | tensors ]
    """
    cfg = ckpt.config
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    parts.append(struct.pack("<5I", *(getattr(cfg, f.name) for f in fields(PfnlConfig))))
    parts.append(struct.pack("<I", len(ckpt.params)))
    for name, t in ckpt.params.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        parts.append(_pack_tensor(name, arr))
    parts.append(struct.pack("<Q", int(ckpt.step)))
    opt = ckpt.optimizer
    if opt is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<BQ", 1, int(opt.t)))
        parts.append(struct.pack("<I", 2 * len(opt.m)))
        for name in opt.m:
            parts.append(_pack_tensor("m:" + name, opt.m[name]))
            parts.append(_pack_tensor("v:" + name, opt.v[name]))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(8) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a PFNL3D checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        cfg = PfnlConfig(*r.unpack("<5I"))
    except ValueError as e:
        raise CheckpointError(f"invalid config block: {e}") from e
    expected = param_shapes(cfg)
    (count,) = r.unpack("<I")
    params = ParamStore()
    for _ in range(count):
        name, arr = r.tensor()
        if name not in expected:
            raise CheckpointError(f"unexpected parameter {name!r}")
        if arr.shape != expected[name]:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs config {expected[name]}")
        if name in params:
            raise CheckpointError(f"duplicate parameter {name!r}")
        params[name] = Tensor(arr, requires_grad=True)
    missing = [n for n in expected if n not in params]
    if missing:
        raise CheckpointError(f"missing parameters: {missing[:3]}{'...' if len(missing) > 3 else ''}")
    (step,) = r.unpack("<Q")
    (has_opt,) = r.unpack("<B")
    opt = None
    if has_opt:
        (t,) = r.unpack("<Q")
        (n,) = r.unpack("<I")
        m, v = {}, {}
        for _ in range(n):
            name, arr = r.tensor()
            kind, _, pname = name.partition(":")
            if pname not in params or kind not in ("m", "v"):
                raise CheckpointError(f"unexpected optimizer tensor {name!r}")
            (m if kind == "m" else v)[pname] = arr
        opt = AdamState(m=m, v=v, t=int(t))
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after checkpoint payload")
    ordered = ParamStore()
    for name in expected:
        ordered[name] = params[name]
    return Checkpoint(cfg, ordered, int(step), opt, version)
