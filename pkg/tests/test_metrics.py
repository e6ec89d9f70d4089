import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfnl3d.metrics import (
    MetricReport,
    MetricRow,
    dice,
    nsd,
    psnr,
    ssim3d,
    surface_voxels,
    wilcoxon_signed_rank,
)
from pfnl3d.volume import Mask, Volume

from oracles import dice_oracle, nsd_oracle, ssim_oracle, surface_oracle, wilcoxon_oracle

# ---------------------------------------------------------------------------
# PSNR


def test_psnr_closed_forms():
    a = np.full((4, 4, 4), 0.5)
    assert psnr(a, np.full((4, 4, 4), 0.6)) == pytest.approx(20.0, abs=1e-6)
    assert psnr(a, a) == math.inf
    drop = psnr(a, a + 0.05) - psnr(a, a + 0.1)
    assert drop == pytest.approx(20 * math.log10(2), abs=1e-6)
    assert psnr(a * 255, a * 255 + 25.5, data_range=255.0) == pytest.approx(20.0, abs=1e-6)


def test_psnr_dim_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_psnr_decreases_with_offset():
    a = np.zeros((3, 3, 3))
    vals = [psnr(a, a + e) for e in (0.01, 0.02, 0.05, 0.1)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


# ---------------------------------------------------------------------------
# SSIM


def test_ssim_identity_and_inverse():
    rng = np.random.default_rng(0)
    x = rng.random((14, 14, 14))
    assert ssim3d(x, x) == pytest.approx(1.0, abs=1e-9)
    pattern = (np.indices((16, 16, 16)).sum(0) // 2 % 2).astype(float)
    assert ssim3d(pattern, 1 - pattern) < 0.2


def test_ssim_matches_literal_reference():
    rng = np.random.default_rng(1)
    x = rng.random((12, 13, 12))
    y = np.clip(x + 0.1 * rng.standard_normal(x.shape), 0, 1)
    assert ssim3d(x, y) == pytest.approx(ssim_oracle(x, y), abs=1e-6)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim3d(np.zeros((10, 12, 12)), np.zeros((10, 12, 12)))


def test_ssim_bounded():
    rng = np.random.default_rng(2)
    for _ in range(3):
        v = ssim3d(rng.random((11, 11, 11)), rng.random((11, 11, 11)))
        assert -1.0 <= v <= 1.0


# ---------------------------------------------------------------------------
# Dice / NSD


def test_dice_cases():
    a = np.zeros((6, 6, 6), np.uint8)
    a[1:3, 1:3, 1:3] = 1
    b = np.zeros_like(a)
    b[4:, 4:, 4:] = 1
    assert dice(a, a) == 1.0
    assert dice(a, b) == 0.0
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 1.0


def test_dice_oracle_random():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = rng.random((8, 8, 8)) < 0.3, rng.random((8, 8, 8)) < 0.5
        assert dice(a, b) == dice_oracle(a, b)
        assert dice(a, b) == dice(b, a)


def test_surface_matches_oracle():
    rng = np.random.default_rng(4)
    m = rng.random((7, 8, 6)) < 0.6
    np.testing.assert_array_equal(surface_voxels(m), surface_oracle(m))


def test_nsd_shifted_cube():
    a = np.zeros((8, 8, 8), bool)
    a[2:6, 2:6, 2:6] = True
    b = np.roll(a, 1, axis=2)
    assert nsd(a, a, 2.0) == 1.0
    assert nsd(a, b, 2.0) == 1.0
    low = nsd(a, b, 0.5)
    assert low < 1.0
    assert low == pytest.approx(nsd_oracle(a, b, 0.5), abs=1e-12)


def test_nsd_empty_cases_and_errors():
    z = np.zeros((4, 4, 4), bool)
    o = z.copy()
    o[1, 1, 1] = True
    assert nsd(z, z) == 1.0
    assert nsd(z, o) == 0.0
    with pytest.raises(ValueError):
        nsd(o, o, 0.0)
    with pytest.raises(ValueError):
        nsd(Mask(o), Mask(o, spacing=(2, 1, 1)))


def test_nsd_anisotropic_spacing():
    rng = np.random.default_rng(5)
    a, b = rng.random((6, 7, 8)) < 0.4, rng.random((6, 7, 8)) < 0.4
    sp = (2.5, 1.0, 0.7)
    expect = nsd_oracle(a, b, 1.6, sp)
    assert nsd(Mask(a, spacing=sp), Mask(b, spacing=sp), 1.6) == pytest.approx(expect, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_nsd_symmetric_monotone(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 6, 6)) < 0.4, rng.random((6, 6, 6)) < 0.4
    vals = [nsd(a, b, t) for t in (0.5, 1.0, 1.5, 2.0, 3.0)]
    assert all(0 <= v <= 1 for v in vals)
    assert all(x <= y for x, y in zip(vals, vals[1:]))
    assert nsd(a, b, 1.5) == nsd(b, a, 1.5)


# ---------------------------------------------------------------------------
# Wilcoxon


def test_wilcoxon_n6_all_positive():
    r = wilcoxon_signed_rank([1, 2, 3, 4, 5, 6], [0] * 6)
    assert r.p_two_sided == 0.03125
    assert (r.n_effective, r.w, r.w_plus, r.w_minus, r.method) == (6, 0.0, 21.0, 0.0, "exact")


def test_wilcoxon_zero_differences():
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1, 2, 3], [1, 2, 3])
    r = wilcoxon_signed_rank([1, 2, 3, 5], [1, 0, 0, 0])
    assert r.n_effective == 3


def test_wilcoxon_swap_symmetry():
    rng = np.random.default_rng(6)
    x, y = rng.random(9), rng.random(9)
    a, b = wilcoxon_signed_rank(x, y), wilcoxon_signed_rank(y, x)
    assert a.p_two_sided == b.p_two_sided
    assert (a.w_plus, a.w_minus) == (b.w_minus, b.w_plus)


def test_wilcoxon_enumeration_small():
    rng = np.random.default_rng(7)
    for n in range(1, 9):
        d = rng.standard_normal(n)
        assert wilcoxon_signed_rank(d, np.zeros(n)).p_two_sided == wilcoxon_oracle(d)


def test_wilcoxon_ties_use_midranks():
    # |d| = 1, 1, 2 -> ranks 1.5, 1.5, 3
    r = wilcoxon_signed_rank([1, -1, 2], [0, 0, 0])
    assert (r.w_plus, r.w_minus) == (4.5, 1.5)
    # sign vectors over ranks (1.5, 1.5, 3) with W+ <= 1.5: {}, {a}, {b} -> 3/8
    assert r.p_two_sided == 0.75


def test_wilcoxon_normal_approximation_large_n():
    rng = np.random.default_rng(8)
    d = rng.standard_normal(40) + 0.5
    r = wilcoxon_signed_rank(d, np.zeros(40))
    assert r.method == "normal_approx"
    # reference from the closed-form statistic
    n = 40
    mu, sd = n * (n + 1) / 4, math.sqrt(n * (n + 1) * (2 * n + 1) / 24)
    z = (abs(r.w_plus - mu) - 0.5) / sd
    assert r.p_two_sided == pytest.approx(math.erfc(z / math.sqrt(2)), rel=1e-12)
    assert wilcoxon_signed_rank(d[:25], np.zeros(25)).method == "exact"


# ---------------------------------------------------------------------------
# reports


def test_metric_report_csv_and_summary():
    rep = MetricReport([MetricRow("a", dice=0.5, nsd=0.25), MetricRow("b", dice=0.7, nsd=0.75)], tau=2.0)
    text = rep.to_csv()
    assert text.splitlines()[0] == "case,psnr,ssim,dice,nsd,tau_mm"
    assert text.splitlines()[1] == "a,nan,nan,0.5,0.25,2.0"
    mean, sd = rep.summary()["dice"]
    assert mean == pytest.approx(0.6) and sd == pytest.approx(math.sqrt(0.02))
    assert math.isnan(rep.summary()["psnr"][0])


def test_volume_inputs_accepted():
    v = Volume(np.full((11, 11, 11), 0.5))
    assert psnr(v, v.with_data(np.full((11, 11, 11), 0.6))) == pytest.approx(20.0, abs=1e-6)
