"""Slow, literal reference implementations used as test oracles."""

import itertools

import numpy as np

from pfnl3d.metrics import gaussian_window_1d


def dice_oracle(a, b):
    inter = sa = sb = 0
    for v, w in zip(a.ravel().tolist(), b.ravel().tolist()):
        inter += v and w
        sa += v
        sb += w
    return 1.0 if sa + sb == 0 else 2 * inter / (sa + sb)


def surface_oracle(m):
    out = np.zeros_like(m, dtype=bool)
    for z, y, x in zip(*np.nonzero(m)):
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            q = (z + dz, y + dy, x + dx)
            if not all(0 <= q[i] < m.shape[i] for i in range(3)) or not m[q]:
                out[z, y, x] = True
                break
    return out


def nsd_oracle(a, b, tau, spacing=(1.0, 1.0, 1.0)):
    sa, sb = surface_oracle(a), surface_oracle(b)
    pa = np.argwhere(sa) * np.array(spacing)
    pb = np.argwhere(sb) * np.array(spacing)
    if len(pa) == 0 and len(pb) == 0:
        return 1.0
    if len(pa) == 0 or len(pb) == 0:
        return 0.0
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return (int((d.min(axis=1) <= tau).sum()) + int((d.min(axis=0) <= tau).sum())) / (len(pa) + len(pb))


def ssim_oracle(x, y, data_range=1.0):
    """Literal loop over every valid 11^3 window."""
    g = gaussian_window_1d(11, 1.5)
    w = g[:, None, None] * g[None, :, None] * g[None, None, :]
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    n = [s - 10 for s in x.shape]
    for i, j, k in itertools.product(*(range(m) for m in n)):
        px, py = x[i : i + 11, j : j + 11, k : k + 11], y[i : i + 11, j : j + 11, k : k + 11]
        mx, my = (w * px).sum(), (w * py).sum()
        vx = (w * (px - mx) ** 2).sum()
        vy = (w * (py - my) ** 2).sum()
        cxy = (w * (px - mx) * (py - my)).sum()
        vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def wilcoxon_oracle(d):
    """Two-sided exact p by enumerating every sign vector."""
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    ranks = np.argsort(np.argsort(np.abs(d))) + 1.0
    w_plus = ranks[d > 0].sum()
    w = min(w_plus, ranks.sum() - w_plus)
    count = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        count += ranks[np.array(signs, dtype=bool)].sum() <= w
    return min(1.0, 2 * count / 2 ** len(d))
