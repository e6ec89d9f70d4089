"""Finite-difference gradient suite over every differentiable op and the
full network."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import GradCheckReport, Tensor, grad_check
from .loss import combined_loss, sobel3d
from .model import PfnlConfig, forward, init_params

OP_TOL = 1e-4
MODEL_TOL = 1e-3
EPS = 1e-3


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def op_cases(rng: np.random.Generator):
    """(name, function, inputs) for every op of the engine."""
    n = rng.standard_normal
    c, k = 2, 2
    att = [n((1, c, 2, 2, 2))] + [
        n(s) for s in [(k, c, 1, 1, 1), (k,), (k, c, 1, 1, 1), (k,), (k, c, 1, 1, 1), (k,), (c, k, 1, 1, 1), (c,)]
    ]
    a, b = n((1, 1, 4, 4, 4)), n((1, 1, 4, 4, 4))
    # keep the L1 terms away from ties
    b_far = a + np.where(rng.uniform(size=a.shape) < 0.5, -1, 1) * rng.uniform(0.2, 1.0, size=a.shape)
    return [
        ("conv3d", ag.conv3d, [n((1, 2, 4, 4, 4)), n((3, 2, 3, 3, 3)), n(3)]),
        ("conv3d_1x1x1", ag.conv3d, [n((2, 3, 2, 3, 2)), n((2, 3, 1, 1, 1)), n(2)]),
        ("leaky_relu", ag.leaky_relu, [_away_from_zero(rng, (1, 2, 3, 3, 3))]),
        ("concat_channels", lambda x, y: ag.concat_channels([x, y]), [n((1, 2, 2, 2, 2)), n((1, 3, 2, 2, 2))]),
        ("split_channels", lambda x: ag.split_channels(x, [1, 2])[1], [n((1, 3, 2, 2, 2))]),
        ("voxel_shuffle", lambda x: ag.voxel_shuffle(x, 2), [n((1, 16, 2, 2, 2))]),
        ("voxel_unshuffle", lambda x: ag.voxel_unshuffle(x, 2), [n((1, 2, 4, 4, 4))]),
        ("subsample", lambda x: ag.subsample(x, 2), [n((1, 2, 3, 4, 5))]),
        ("pad_edge", lambda x: ag.pad_edge(x, 2), [n((1, 2, 3, 2, 4))]),
        ("crop_border", lambda x: ag.crop_border(x, 1), [n((1, 2, 4, 3, 5))]),
        ("nonlocal_attention", ag.nonlocal_attention, att),
        ("resize_trilinear", lambda x: ag.resize_trilinear(x, (5, 3, 7)), [n((1, 2, 3, 4, 5))]),
        ("trilinear_upsample", lambda x: ag.trilinear_upsample(x, 2), [n((1, 2, 3, 3, 3))]),
        ("add", ag.add, [n((2, 3)), n((2, 3))]),
        ("mul", ag.mul, [n((2, 3)), n((2, 3))]),
        ("scale", lambda x: ag.scale(x, 0.7), [n((2, 3))]),
        ("sum", ag.tensor_sum, [n((2, 3))]),
        ("mean", ag.mean, [n((2, 3))]),
        ("l1_loss", ag.l1_loss, [a, b_far]),
        ("sobel3d", sobel3d, [n((1, 1, 4, 4, 4))]),
        ("combined_loss", lambda y, yh: combined_loss(y, yh, 0.7), [a, b]),
    ]


def model_check(seed: int, tol: float = MODEL_TOL, entries_per_param: int = 2, min_total: int = 10) -> GradCheckReport:
    """End-to-end check of forward + L1 loss on a tiny float64 network.

    Coordinates are drawn per input/parameter tensor; those whose +/- eps
    evaluations straddle a leaky_relu or L1 kink are skipped, and at least
    ``min_total`` kink-free coordinates must be checked overall.
    """
    rng = np.random.default_rng(seed)
    cfg = PfnlConfig(channels=4, n_pfrb=1, scale=2, nonlocal_max_positions=64)
    params = init_params(cfg, seed, dtype=np.float64)
    names = list(params)
    inputs = [rng.uniform(0, 1, size=(1, 1, 4, 4, 4)) for _ in range(3)]
    target = rng.uniform(0, 1, size=(1, 1, 8, 8, 8))

    def f(*arrays):
        ps = ag.ParamStore()
        for name, t in zip(names, arrays[3:]):
            ps[name] = t
        out = forward(ps, cfg, *arrays[:3])
        return ag.l1_loss(out, Tensor(target))

    arrays = inputs + [params[k].data for k in names]
    return grad_check(
        f,
        arrays,
        eps=EPS,
        tol=tol,
        name=f"pfnl_forward[seed={seed}]",
        seed=seed,
        max_entries=entries_per_param,
        min_total=min_total,
    )


def run_suite(seeds=(0, 1, 2), include_model: bool = True) -> list[GradCheckReport]:
    reports = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, fn, inputs in op_cases(rng):
            reports.append(grad_check(fn, inputs, eps=EPS, tol=OP_TOL, name=f"{name}[seed={seed}]", seed=seed))
        if include_model:
            reports.append(model_check(seed))
    return reports


__all__ = ["run_suite", "model_check", "op_cases", "OP_TOL", "MODEL_TOL"]
