"""3D Sobel edge operator and the L1 + edge reconstruction objective."""
from __future__ import annotations

import numpy as np

from .autograd import Tensor, _result, add, l1_loss, pad_edge, scale

DEFAULT_LAMBDA_EDGE = 0.7


def sobel_kernels(dtype=np.float32) -> np.ndarray:
    """Stacked (3, 1, 3, 3, 3) kernels for d/dx, d/dy, d/dz.

    Output channel order is x, y, z; arrays are indexed (z, y, x).
    """
    deriv = np.array([-1.0, 0.0, 1.0])
    smooth = np.array([1.0, 2.0, 1.0])
    kx = smooth[:, None, None] * smooth[None, :, None] * deriv[None, None, :]
    ky = smooth[:, None, None] * deriv[None, :, None] * smooth[None, None, :]
    kz = deriv[:, None, None] * smooth[None, :, None] * smooth[None, None, :]
    return np.stack([kx, ky, kz])[:, None].astype(dtype)


_DERIV = (-1.0, 0.0, 1.0)
_SMOOTH = (1.0, 2.0, 1.0)


def _corr_valid(a: np.ndarray, taps, axis: int) -> np.ndarray:
    n = a.shape[axis] - len(taps) + 1
    out = None
    for t, c in enumerate(taps):
        if c == 0:
            continue
        term = np.take(a, range(t, t + n), axis=axis)
        term = term if c == 1 else c * term
        out = term if out is None else out + term
    return out


def _corr_adjoint(g: np.ndarray, taps, axis: int) -> np.ndarray:
    k = len(taps) - 1
    widths = [(0, 0)] * g.ndim
    widths[axis] = (k, k)
    return _corr_valid(np.pad(g, widths), taps[::-1], axis)


def _axis_taps(channel: int) -> list:
    # channel 0 differentiates along x (array axis 4), 1 along y, 2 along z
    deriv_axis = 4 - channel
    return [(ax, _DERIV if ax == deriv_axis else _SMOOTH) for ax in (deriv_axis, *(a for a in (4, 3, 2) if a != deriv_axis))]


def _sobel_valid(xp: Tensor) -> Tensor:
    """Separable Sobel over an already padded (b, 1, d+2, h+2, w+2) tensor."""
    outs = []
    for ch in range(3):
        a = xp.data
        for ax, taps in _axis_taps(ch):
            a = _corr_valid(a, taps, ax)
        outs.append(a)

    def bw(g):
        total = None
        for ch in range(3):
            a = g[:, ch : ch + 1]
            for ax, taps in reversed(_axis_taps(ch)):
                a = _corr_adjoint(a, taps, ax)
            total = a if total is None else total + a
        return (total,)

    return _result(np.concatenate(outs, axis=1), (xp,), bw, "sobel3d")


def sobel3d(x: Tensor) -> Tensor:
    """Per-axis Sobel responses (b, 3, d, h, w) of a single-channel volume.

    Borders are edge-replicated and the stencils are applied separably
    (difference first), so a constant volume responds with exactly 0
    everywhere.
    """
    if x.data.ndim != 5 or x.shape[1] != 1:
        raise ValueError(f"sobel3d expects shape (b, 1, d, h, w), got {x.shape}")
    return _sobel_valid(pad_edge(x, 1))


def combined_loss(y: Tensor, y_hat: Tensor, lam: float = DEFAULT_LAMBDA_EDGE, return_terms: bool = False):
    """``L1(y, y_hat) + lam * L1(sobel(y), sobel(y_hat))``.

    With ``return_terms`` the intensity and edge terms are returned as
    floats alongside the loss tensor.
    """
    if y.shape != y_hat.shape:
        raise ValueError(f"combined_loss: shape mismatch {y.shape} vs {y_hat.shape}")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    intensity = l1_loss(y_hat, y)
    if lam == 0:
        loss, edge_val = intensity, 0.0
    else:
        edge = l1_loss(sobel3d(y_hat), sobel3d(y))
        edge_val = float(edge.data)
        loss = add(intensity, scale(edge, lam))
    if return_terms:
        return loss, float(intensity.data), edge_val
    return loss
