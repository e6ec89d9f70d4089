"""Image-quality and segmentation-overlap metrics, plus the exact paired
Wilcoxon signed-rank test."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .volume import Mask, Volume

EXACT_MAX_N = 25


def _arr(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)


def _check_dims(a, b) -> None:
    sa = a.dims if isinstance(a, Volume) else np.shape(a)
    sb = b.dims if isinstance(b, Volume) else np.shape(b)
    if tuple(sa) != tuple(sb):
        raise ValueError(f"dimension mismatch: {tuple(sa)} vs {tuple(sb)}")


def psnr(ref, test, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    _check_dims(ref, test)
    mse = float(np.mean((_arr(ref) - _arr(test)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window_1d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-(t**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    for ax in range(3):
        win = sliding_window_view(x, g.size, axis=ax)
        x = win @ g
    return x


def ssim3d(ref, test, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM over every position where the 3D Gaussian window fits.

    Local statistics are Gaussian-weighted (weights sum to 1, no
    unbiased-variance correction); C1 = (0.01 L)^2, C2 = (0.03 L)^2.
    """
    _check_dims(ref, test)
    x, y = _arr(ref), _arr(test)
    if min(x.shape) < win_size:
        raise ValueError(f"volume {x.shape} smaller than SSIM window {win_size}")
    g = gaussian_window_1d(win_size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def _mask_arr(m) -> np.ndarray:
    return np.asarray(m.data if isinstance(m, Volume) else m).astype(bool)


def dice(a, b) -> float:
    """2|A & B| / (|A| + |B|); two empty masks score 1."""
    _check_dims(a, b)
    A, B = _mask_arr(a), _mask_arr(b)
    total = int(A.sum()) + int(B.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(A, B).sum()) / total


def surface_voxels(m) -> np.ndarray:
    """Foreground voxels with a 6-neighbour in the background or on the volume edge."""
    A = _mask_arr(m)
    padded = np.pad(A, 1, constant_values=False)
    interior = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(3, 1), border_value=0)
    return (padded & ~interior)[1:-1, 1:-1, 1:-1]


def _spacing(a, b) -> tuple[float, float, float]:
    if isinstance(a, Volume) and isinstance(b, Volume):
        if a.dims != b.dims or a.spacing != b.spacing or a.origin != b.origin:
            raise ValueError("masks do not share the same geometry")
        return a.spacing
    if isinstance(a, Volume):
        return a.spacing
    if isinstance(b, Volume):
        return b.spacing
    return (1.0, 1.0, 1.0)


def nsd(a, b, tau: float = 2.0, spacing: Sequence[float] | None = None) -> float:
    """Normalized surface distance at tolerance ``tau`` mm.

    Fraction of the two boundaries' voxels lying within ``tau`` (Euclidean,
    spacing-aware) of the other boundary. Empty/empty gives 1, one empty 0.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    _check_dims(a, b)
    sp = tuple(spacing) if spacing is not None else _spacing(a, b)
    sa, sb = surface_voxels(a), surface_voxels(b)
    na, nb = int(sa.sum()), int(sb.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    # exact Euclidean distance to the nearest boundary voxel of the other mask
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=sp)
    dist_to_a = ndimage.distance_transform_edt(~sa, sampling=sp)
    hits = int((dist_to_b[sa] <= tau).sum()) + int((dist_to_a[sb] <= tau).sum())
    return hits / (na + nb)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


@dataclass(frozen=True)
class WilcoxonResult:
    n_effective: int
    w: float
    w_plus: float
    w_minus: float
    p_two_sided: float
    method: str  # "exact" | "normal_approx"


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def signed_rank_null_counts(doubled_ranks: Sequence[int]) -> dict[int, int]:
    """Number of sign assignments giving each doubled W+ value.

    Counting is over all ``2**n`` sign vectors of the realized (possibly
    tied) ranks, accumulated one rank at a time.
    """
    counts = {0: 1}
    for r in doubled_ranks:
        nxt: dict[int, int] = {}
        for s, c in counts.items():
            nxt[s] = nxt.get(s, 0) + c
            nxt[s + r] = nxt.get(s + r, 0) + c
        counts = nxt
    return counts


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float]) -> WilcoxonResult:
    """Paired two-sided Wilcoxon signed-rank test on ``x - y``.

    Zero differences are dropped; tied |d| get mid-ranks. The p-value is
    exact for up to 25 non-zero pairs, otherwise a tie-corrected normal
    approximation with continuity correction.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 1:
        raise ValueError("x and y must be 1-d sequences of equal, non-zero length")
    d = x - y
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValueError("all paired differences are zero; the test is undefined")
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_MAX_N:
        doubled = [int(round(2 * r)) for r in ranks]
        counts = signed_rank_null_counts(doubled)
        target = int(round(2 * w))
        tail = sum(c for s, c in counts.items() if s <= target)
        p = min(Fraction(1), 2 * Fraction(tail, 2**n))
        return WilcoxonResult(n, w, w_plus, w_minus, float(p), "exact")
    mu = n * (n + 1) / 4
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - float(np.sum(tie_counts**3 - tie_counts)) / 48
    z = max(abs(w_plus - mu) - 0.5, 0.0) / math.sqrt(var)
    p = min(1.0, math.erfc(z / math.sqrt(2)))
    return WilcoxonResult(n, w, w_plus, w_minus, p, "normal_approx")


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricRow:
    case: str
    psnr: float = math.nan
    ssim: float = math.nan
    dice: float = math.nan
    nsd: float = math.nan


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)
    tau: float | None = None

    COLUMNS = ("psnr", "ssim", "dice", "nsd")

    def summary(self) -> dict[str, tuple[float, float]]:
        """Mean and sample standard deviation per metric (NaNs ignored)."""
        out = {}
        for col in self.COLUMNS:
            vals = np.array([getattr(r, col) for r in self.rows], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            if vals.size == 0:
                out[col] = (math.nan, math.nan)
            else:
                sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
                out[col] = (float(vals.mean()), sd)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        header = ["case", *self.COLUMNS]
        if self.tau is not None:
            header.append("tau_mm")
        wr.writerow(header)
        for r in self.rows:
            row = [r.case] + [repr(float(getattr(r, c))) for c in self.COLUMNS]
            if self.tau is not None:
                row.append(repr(float(self.tau)))
            wr.writerow(row)
        return buf.getvalue()
