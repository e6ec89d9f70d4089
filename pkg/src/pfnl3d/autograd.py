"""Small reverse-mode differentiation engine.

Only the operations needed by the restoration network and its loss are
provided. Every op computes its forward result with numpy and registers a
hand-written backward closure on the output tensor. Tensors use the
``(batch, channels, d, h, w)`` layout for anything volumetric.

Storage is float32 by default; passing float64 arrays gives a float64
"shadow" graph, which is what :func:`grad_check` uses.
"""
from __future__ import annotations

import contextlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ParamStore",
    "GradCheckReport",
    "no_grad",
    "set_debug",
    "conv3d",
    "leaky_relu",
    "concat_channels",
    "split_channels",
    "voxel_shuffle",
    "voxel_unshuffle",
    "nonlocal_attention",
    "subsample",
    "resize_trilinear",
    "trilinear_upsample",
    "add",
    "mul",
    "scale",
    "tensor_sum",
    "mean",
    "l1_loss",
    "backward",
    "grad_check",
    "interp_matrix",
]

_GRAD_ENABLED = True
_DEBUG = False
# when a list, piecewise-linear ops append their active branch pattern
_KINK_LOG: list | None = None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference, validation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug(flag: bool) -> None:
    """When on, every op output is checked for NaN/Inf."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    """An n-d float array that may take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{op})"


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf.

    The graph is consumed: a second call on the same loss raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._consumed = True
    loss._consumed = True


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(
        np.asarray(a.data.sum(), dtype=a.dtype).reshape(()),
        (a,),
        lambda g: (np.broadcast_to(g, shape).astype(g.dtype),),
        "sum",
    )


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _result(
        np.asarray(a.data.mean(), dtype=a.dtype).reshape(()),
        (a,),
        lambda g: (np.full(shape, g / n, dtype=g.dtype),),
        "mean",
    )


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """``x`` where ``x >= 0`` else ``slope * x``; derivative at 0 is 1."""
    pos = x.data >= 0
    if _KINK_LOG is not None:
        _KINK_LOG.append(pos)
    factor = np.where(pos, x.dtype.type(1), x.dtype.type(slope))
    return _result(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference. The subgradient at exact ties is 0."""
    if a.shape != b.shape:
        raise ValueError(f"l1_loss: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    sgn = np.sign(diff)
    if _KINK_LOG is not None:
        _KINK_LOG.append(sgn)

    def bw(g):
        ga = sgn * (g / n)
        return ga, -ga

    return _result(np.asarray(np.abs(diff).mean(), dtype=a.dtype).reshape(()), (a, b), bw, "l1_loss")


# ---------------------------------------------------------------------------
# channel plumbing


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.data.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: dim mismatch {t.shape} vs {ref}")
    sizes = [t.shape[1] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs))]

    return _result(np.concatenate([t.data for t in xs], axis=1), tuple(xs), bw, "concat")


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Inverse of :func:`concat_channels`: one output tensor per size."""
    if sum(sizes) != x.shape[1]:
        raise ValueError(f"split sizes {sizes} do not sum to {x.shape[1]} channels")
    outs = []
    start = 0
    for s in sizes:
        lo, hi = start, start + s

        def bw(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            return (full,)

        outs.append(_result(np.ascontiguousarray(x.data[:, lo:hi]), (x,), bw, "split"))
        start = hi
    return outs


def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    b, cr, d, h, w = a.shape
    c = cr // (r**3)
    a = a.reshape(b, c, r, r, r, d, h, w)
    a = a.transpose(0, 1, 5, 2, 6, 3, 7, 4)
    return np.ascontiguousarray(a.reshape(b, c, d * r, h * r, w * r))


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    b, c, D, H, W = a.shape
    d, h, w = D // r, H // r, W // r
    a = a.reshape(b, c, d, r, h, r, w, r)
    a = a.transpose(0, 1, 3, 5, 7, 2, 4, 6)
    return np.ascontiguousarray(a.reshape(b, c * r**3, d, h, w))


def voxel_shuffle(x: Tensor, r: int) -> Tensor:
    """Move ``r**3`` channel groups into an ``r``-fold larger grid."""
    if x.data.ndim != 5 or x.shape[1] % (r**3):
        raise ValueError(f"voxel_shuffle: channels {x.shape[1]} not divisible by {r}^3")
    if r == 1:
        return _result(x.data.copy(), (x,), lambda g: (g,), "voxel_shuffle")
    return _result(_shuffle(x.data, r), (x,), lambda g: (_unshuffle(g, r),), "voxel_shuffle")


def voxel_unshuffle(x: Tensor, r: int) -> Tensor:
    if x.data.ndim != 5 or any(s % r for s in x.shape[2:]):
        raise ValueError(f"voxel_unshuffle: spatial dims {x.shape[2:]} not divisible by {r}")
    return _result(_unshuffle(x.data, r), (x,), lambda g: (_shuffle(g, r),), "voxel_unshuffle")


def subsample(x: Tensor, stride: int) -> Tensor:
    """Strided copy ``x[..., ::s, ::s, ::s]``."""
    sl = (slice(None), slice(None), slice(None, None, stride), slice(None, None, stride), slice(None, None, stride))

    def bw(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[sl]), (x,), bw, "subsample")


def pad_edge(x: Tensor, p: int) -> Tensor:
    """Replicate the border voxels ``p`` times along each spatial axis."""
    if p < 0:
        raise ValueError("pad_edge: p must be >= 0")
    widths = ((0, 0), (0, 0), (p, p), (p, p), (p, p))

    def bw(g):
        g = g.copy()
        for ax in (4, 3, 2):
            n = g.shape[ax] - 2 * p
            lo = np.take(g, range(0, p + 1), axis=ax).sum(axis=ax, keepdims=True)
            hi = np.take(g, range(n + p - 1, n + 2 * p), axis=ax).sum(axis=ax, keepdims=True)
            core = np.take(g, range(p, p + n), axis=ax)
            if n == 1:
                core = lo + hi - np.take(g, [p], axis=ax)
            else:
                idx = [slice(None)] * 5
                idx[ax] = slice(0, 1)
                core[tuple(idx)] = lo
                idx[ax] = slice(n - 1, n)
                core[tuple(idx)] = hi
            g = core
        return (np.ascontiguousarray(g),)

    return _result(np.pad(x.data, widths, mode="edge"), (x,), bw, "pad_edge")


def crop_border(x: Tensor, p: int) -> Tensor:
    """Drop ``p`` voxels from both ends of every spatial axis."""
    if p == 0:
        return _result(x.data.copy(), (x,), lambda g: (g,), "crop_border")
    sl = (slice(None), slice(None), slice(p, -p), slice(p, -p), slice(p, -p))

    def bw(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[sl]), (x,), bw, "crop_border")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: tuple[int, int, int]) -> np.ndarray:
    """Padded (b,c,D,H,W) -> columns (c*kz*ky*kx, b*d*h*w)."""
    win = sliding_window_view(xp, k, axis=(2, 3, 4))
    # win: b, c, d, h, w, kz, ky, kx
    cols = win.transpose(1, 5, 6, 7, 0, 2, 3, 4)
    return np.ascontiguousarray(cols).reshape(xp.shape[1] * k[0] * k[1] * k[2], -1)


def _conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Zero-padded stride-1 cross-correlation, output shape (b,co,d,h,w)."""
    b, ci, d, h, wd = x.shape
    co, _, kz, ky, kx = w.shape
    if (kz, ky, kx) == (1, 1, 1):
        xm = x.transpose(1, 0, 2, 3, 4).reshape(ci, -1)
        out = w.reshape(co, ci) @ xm
    else:
        pz, py, px = kz // 2, ky // 2, kx // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pz, pz), (py, py), (px, px)))
        out = w.reshape(co, -1) @ _im2col(xp, (kz, ky, kx))
    return np.ascontiguousarray(out.reshape(co, b, d, h, wd).transpose(1, 0, 2, 3, 4))


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 3D cross-correlation with zero 'same' padding.

    ``x``: (b, ci, d, h, w); ``weight``: (co, ci, kz, ky, kx) with odd
    extents; ``bias``: (co,) or None.
    """
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise ValueError("conv3d expects 5-d input and weight")
    co, ci, kz, ky, kx = weight.shape
    if x.shape[1] != ci:
        raise ValueError(f"conv3d: input has {x.shape[1]} channels, weight expects {ci}")
    if not (kz % 2 and ky % 2 and kx % 2):
        raise ValueError(f"conv3d: kernel extents must be odd, got {(kz, ky, kx)}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"conv3d: bias shape {bias.shape} != ({co},)")
    xd, wd = x.data, weight.data
    out = _conv_same(xd, wd)
    if bias is not None:
        out += bias.data.reshape(1, co, 1, 1, 1)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            # adjoint of 'same' correlation: correlate with the flipped,
            # channel-transposed kernel
            wt = np.ascontiguousarray(wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gx = _conv_same(g, wt)
        if weight.requires_grad:
            gm = g.transpose(1, 0, 2, 3, 4).reshape(co, -1)
            if (kz, ky, kx) == (1, 1, 1):
                cols = xd.transpose(1, 0, 2, 3, 4).reshape(ci, -1)
            else:
                pz, py, px = kz // 2, ky // 2, kx // 2
                xp = np.pad(xd, ((0, 0), (0, 0), (pz, pz), (py, py), (px, px)))
                cols = _im2col(xp, (kz, ky, kx))
            gw = (gm @ cols.T).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw, "conv3d")


# ---------------------------------------------------------------------------
# non-local attention


def nonlocal_attention(
    x: Tensor,
    w_theta: Tensor,
    b_theta: Tensor,
    w_phi: Tensor,
    b_phi: Tensor,
    w_g: Tensor,
    b_g: Tensor,
    w_out: Tensor,
    b_out: Tensor,
    max_positions: int | None = None,
    residual: bool = True,
) -> Tensor:
    """Embedded-Gaussian non-local block over all spatial positions.

    ``theta``, ``phi`` and ``g`` are 1x1x1 projections ``c -> k``; ``out``
    maps ``k -> c``. Returns ``x + out(softmax(theta^T phi / sqrt(k)) g)``,
    or only the attention term when ``residual`` is False.
    """
    b, c = x.shape[:2]
    spatial = x.shape[2:]
    p = int(np.prod(spatial))
    if max_positions is not None and p > max_positions:
        raise ValueError(f"nonlocal_attention: {p} positions exceed budget {max_positions}")
    k = w_theta.shape[0]
    wt = w_theta.data.reshape(k, c)
    wp = w_phi.data.reshape(k, c)
    wg = w_g.data.reshape(k, c)
    wo = w_out.data.reshape(c, k)
    X = x.data.reshape(b, c, p)
    T = np.einsum("kc,bcp->bkp", wt, X) + b_theta.data.reshape(1, k, 1)
    P = np.einsum("kc,bcp->bkp", wp, X) + b_phi.data.reshape(1, k, 1)
    G = np.einsum("kc,bcp->bkp", wg, X) + b_g.data.reshape(1, k, 1)
    inv = x.dtype.type(1.0 / math.sqrt(k))
    S = np.matmul(T.transpose(0, 2, 1), P)  # b, query, key
    S *= inv
    S -= S.max(axis=2, keepdims=True)
    A = np.exp(S, out=S)
    A /= A.sum(axis=2, keepdims=True)
    Y = np.matmul(G, A.transpose(0, 2, 1))  # b, k, query
    Z = np.einsum("ck,bkp->bcp", wo, Y) + b_out.data.reshape(1, c, 1)
    out = (X + Z) if residual else Z

    def bw(gout):
        dZ = gout.reshape(b, c, p)
        dX = dZ.copy() if residual else np.zeros_like(X)
        dwo = np.einsum("bcp,bkp->ck", dZ, Y)
        dbo = dZ.sum(axis=(0, 2))
        dY = np.einsum("ck,bcp->bkp", wo, dZ)
        dG = np.matmul(dY, A)
        dA = np.matmul(dY.transpose(0, 2, 1), G)
        dS = A * (dA - (dA * A).sum(axis=2, keepdims=True))
        dS *= inv
        dT = np.matmul(P, dS.transpose(0, 2, 1))
        dP = np.matmul(T, dS)
        grads_w = []
        grads_b = []
        for dproj, wmat in ((dT, wt), (dP, wp), (dG, wg)):
            grads_w.append(np.einsum("bkp,bcp->kc", dproj, X))
            grads_b.append(dproj.sum(axis=(0, 2)))
            dX += np.einsum("kc,bkp->bcp", wmat, dproj)
        return (
            dX.reshape(x.shape),
            grads_w[0].reshape(w_theta.shape),
            grads_b[0],
            grads_w[1].reshape(w_phi.shape),
            grads_b[1],
            grads_w[2].reshape(w_g.shape),
            grads_b[2],
            dwo.reshape(w_out.shape),
            dbo,
        )

    parents = (x, w_theta, b_theta, w_phi, b_phi, w_g, b_g, w_out, b_out)
    return _result(out.reshape(x.shape), parents, bw, "nonlocal_attention")


def attention_weights(x: np.ndarray, w_theta: np.ndarray, b_theta: np.ndarray, w_phi: np.ndarray, b_phi: np.ndarray) -> np.ndarray:
    """Softmax attention matrix (b, query, key) for inspection and tests."""
    b, c = x.shape[:2]
    k = w_theta.shape[0]
    X = x.reshape(b, c, -1)
    T = np.einsum("kc,bcp->bkp", w_theta.reshape(k, c), X) + b_theta.reshape(1, k, 1)
    P = np.einsum("kc,bcp->bkp", w_phi.reshape(k, c), X) + b_phi.reshape(1, k, 1)
    S = np.matmul(T.transpose(0, 2, 1), P) / math.sqrt(k)
    S -= S.max(axis=2, keepdims=True)
    A = np.exp(S)
    return A / A.sum(axis=2, keepdims=True)


# ---------------------------------------------------------------------------
# interpolation


def interp_matrix(src_coords: np.ndarray, n_in: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights (n_out, n_in) for continuous source indices.

    Coordinates are clamped to ``[0, n_in - 1]`` (clamp-to-edge).
    """
    pos = np.clip(np.asarray(src_coords, dtype=np.float64), 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((pos.size, n_in), dtype=np.float64)
    rows = np.arange(pos.size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def _half_pixel_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    o = np.arange(n_out, dtype=np.float64)
    src = (o + 0.5) * (n_in / n_out) - 0.5
    return interp_matrix(src, n_in, dtype)


def _apply_axis(a: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    out = np.tensordot(a, m, axes=([axis], [1]))  # moved axis goes last
    return np.ascontiguousarray(np.moveaxis(out, -1, axis))


def resize_trilinear(x: Tensor, out_dims: Sequence[int]) -> Tensor:
    """Align-corners-false trilinear resize of the three spatial axes."""
    out_dims = tuple(int(s) for s in out_dims)
    in_dims = x.shape[2:]
    if any(s < 1 for s in out_dims):
        raise ValueError(f"resize_trilinear: degenerate output dims {out_dims}")
    if out_dims == in_dims:
        return _result(x.data.copy(), (x,), lambda g: (g,), "resize_trilinear")
    mats = [None if ni == no else _half_pixel_matrix(ni, no, x.dtype) for ni, no in zip(in_dims, out_dims)]
    y = x.data
    for ax, m in enumerate(mats):
        if m is not None:
            y = _apply_axis(y, m, ax + 2)

    def bw(g):
        for ax, m in enumerate(mats):
            if m is not None:
                g = _apply_axis(g, np.ascontiguousarray(m.T), ax + 2)
        return (g,)

    return _result(y, (x,), bw, "resize_trilinear")


def trilinear_upsample(x: Tensor, r: int) -> Tensor:
    if r < 1:
        raise ValueError("upsampling factor must be >= 1")
    return resize_trilinear(x, tuple(r * s for s in x.shape[2:]))


# ---------------------------------------------------------------------------
# parameters


class ParamStore(OrderedDict):
    """Ordered name -> Tensor map of trainable parameters."""

    def __setitem__(self, name: str, value: Tensor) -> None:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        if not isinstance(value, Tensor):
            value = Tensor(value, requires_grad=True)
        value.requires_grad = True
        if value.grad is None:
            value.grad = np.zeros_like(value.data)
        super().__setitem__(name, value)

    def zero_grad(self) -> None:
        for t in self.values():
            t.zero_grad()

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, t in self.items():
            out[name] = Tensor(t.data.astype(dtype), requires_grad=True)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(next(iter(self.values())).dtype) if self else ParamStore()

    def n_values(self) -> int:
        return int(sum(t.data.size for t in self.values()))


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    """Per-input maximum relative error between analytic and numeric grads.

    ``n_skipped`` counts coordinates whose +/- eps evaluations fell on
    different sides of a kink (leaky_relu at 0, L1 at ties); central
    differences are meaningless there, so other coordinates are used.
    """

    name: str
    max_rel_error: list[float] = field(default_factory=list)
    tol: float = 1e-4
    n_checked: list[int] = field(default_factory=list)
    n_skipped: list[int] = field(default_factory=list)
    # None: every input needs >= 1 checked coordinate; else a pooled minimum
    min_total: int | None = None

    @property
    def worst(self) -> float:
        errs = [e for e in self.max_rel_error if not math.isnan(e)]
        return max(errs) if errs else 0.0

    @property
    def passed(self) -> bool:
        if self.min_total is None:
            enough = bool(self.n_checked) and all(self.n_checked)
        else:
            enough = sum(self.n_checked) >= self.min_total
        return enough and self.worst < self.tol

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        errs = ", ".join("n/a" if math.isnan(e) else f"{e:.2e}" for e in self.max_rel_error)
        skipped = sum(self.n_skipped)
        extra = f" ({skipped} kink-straddling coords skipped)" if skipped else ""
        return f"{self.name}: max rel err [{errs}] tol {self.tol:g} {status}{extra}"


def _rel_err(a: np.ndarray, n: np.ndarray, floor: float = 1e-6) -> float:
    # floor keeps exactly-zero gradients (e.g. softmax shift invariance) from
    # turning float64 round-off into a large ratio
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def _same_pattern(p: list, q: list) -> bool:
    return len(p) == len(q) and all(np.array_equal(a, b) for a, b in zip(p, q))


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-3,
    tol: float = 1e-4,
    name: str = "",
    seed: int = 0,
    max_entries: int | None = None,
    wrt: Sequence[int] | None = None,
    min_total: int | None = None,
) -> GradCheckReport:
    """Compare backward() against central differences in float64.

    ``f`` maps Tensors to a Tensor of any shape; a fixed random projection
    reduces non-scalar outputs to a scalar. ``max_entries`` limits the number
    of randomly chosen coordinates checked per input. Relative error is
    ``|a - n| / max(|a|, |n|, 1e-6)`` per coordinate.
    """
    global _KINK_LOG
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)

    probe = f(*[Tensor(a) for a in arrays])
    proj = rng.standard_normal(probe.shape) if probe.data.size > 1 else None

    def scalar(vals: list[np.ndarray], track: bool):
        ts = [Tensor(a, requires_grad=(track and i in wrt)) for i, a in enumerate(vals)]
        out = f(*ts)
        if proj is not None:
            out = tensor_sum(mul(out, Tensor(proj)))
        return out, ts

    def evaluate(vals) -> tuple[float, list]:
        global _KINK_LOG
        _KINK_LOG = []
        try:
            val = float(scalar(vals, False)[0].data)
            return val, _KINK_LOG
        finally:
            _KINK_LOG = None

    loss, ts = scalar(arrays, True)
    backward(loss)
    _, k0 = evaluate(arrays)
    report = GradCheckReport(name=name or getattr(f, "__name__", "f"), tol=tol, min_total=min_total)
    for i in wrt:
        analytic = ts[i].grad.reshape(-1)
        flat = arrays[i].reshape(-1)
        order = rng.permutation(flat.size)
        want = flat.size if max_entries is None else min(max_entries, flat.size)
        used, numeric, skipped = [], [], 0
        for e in order:
            if len(used) >= want:
                break
            orig = flat[e]
            flat[e] = orig + eps
            fp, kp = evaluate(arrays)
            flat[e] = orig - eps
            fm, km = evaluate(arrays)
            flat[e] = orig
            if not (_same_pattern(kp, k0) and _same_pattern(km, k0)):
                skipped += 1
                continue
            used.append(e)
            numeric.append((fp - fm) / (2 * eps))
        idx = np.array(used, dtype=np.int64)
        err = _rel_err(analytic[idx], np.array(numeric)) if used else math.nan
        report.max_rel_error.append(err)
        report.n_checked.append(len(used))
        report.n_skipped.append(skipped)
    return report
