import numpy as np
import pytest

from pfnl3d import autograd as ag
from pfnl3d.autograd import Tensor, grad_check
from pfnl3d.loss import combined_loss, sobel3d, sobel_kernels


def sobel_loops(x):
    """Brute-force edge-padded Sobel responses of a (d, h, w) array."""
    k = sobel_kernels(np.float64)[:, 0]
    xp = np.pad(x, 1, mode="edge")
    out = np.zeros((3,) + x.shape)
    for c in range(3):
        for z, y, w in np.ndindex(*x.shape):
            out[c, z, y, w] = np.sum(xp[z : z + 3, y : y + 3, w : w + 3] * k[c])
    return out


def test_kernel_properties():
    k = sobel_kernels(np.float64)[:, 0]
    for c in range(3):
        assert k[c].sum() == 0
    # flipping the derivative axis negates the kernel (x is the last array axis)
    np.testing.assert_array_equal(np.flip(k[0], axis=2), -k[0])
    np.testing.assert_array_equal(np.flip(k[1], axis=1), -k[1])
    np.testing.assert_array_equal(np.flip(k[2], axis=0), -k[2])
    assert k[0][1, 1, 2] == 4 and k[0][0, 0, 2] == 1


def test_matches_brute_force():
    x = np.random.default_rng(0).standard_normal((4, 5, 6))
    np.testing.assert_allclose(sobel3d(Tensor(x[None, None])).data[0], sobel_loops(x), atol=1e-12)


def test_constant_and_ramp():
    out = sobel3d(Tensor(np.full((1, 1, 5, 5, 5), 0.37))).data
    assert not out.any()
    ramp = np.broadcast_to(np.arange(6.0), (6, 6, 6)).copy()
    r = sobel3d(Tensor(ramp[None, None])).data[0]
    assert np.all(r[0, 1:-1, 1:-1, 1:-1] == 32.0)
    assert not r[1:, 1:-1, 1:-1, 1:-1].any()


def test_mirror_negates_x_channel():
    x = np.random.default_rng(1).standard_normal((5, 5, 5))
    a = sobel_loops(x)[0]
    b = sobel_loops(np.flip(x, axis=2))[0]
    np.testing.assert_allclose(np.flip(b, axis=2)[1:-1, 1:-1, 1:-1], -a[1:-1, 1:-1, 1:-1], atol=1e-12)


def test_multichannel_rejected():
    with pytest.raises(ValueError):
        sobel3d(Tensor(np.zeros((1, 2, 3, 3, 3))))


def test_combined_loss_cases():
    rng = np.random.default_rng(2)
    y = Tensor(rng.random((1, 1, 5, 5, 5)))
    yh = Tensor(rng.random((1, 1, 5, 5, 5)))
    assert combined_loss(y, y).item() == 0.0
    assert combined_loss(y, yh, 0.0).item() == ag.l1_loss(yh, y).item()
    a, b = Tensor(np.full((1, 1, 4, 4, 4), 0.3)), Tensor(np.full((1, 1, 4, 4, 4), 0.5))
    for lam in (0.0, 0.7, 5.0):
        loss, inten, edge = combined_loss(a, b, lam, return_terms=True)
        assert edge == 0.0
        assert loss.item() == pytest.approx(0.2, abs=1e-15)


def test_loss_errors():
    with pytest.raises(ValueError):
        combined_loss(Tensor(np.zeros((1, 1, 3, 3, 3))), Tensor(np.zeros((1, 1, 3, 3, 4))))
    with pytest.raises(ValueError):
        combined_loss(Tensor(np.zeros((1, 1, 3, 3, 3))), Tensor(np.zeros((1, 1, 3, 3, 3))), -0.1)


def test_monotone_in_lambda_and_nonnegative():
    rng = np.random.default_rng(3)
    y, yh = Tensor(rng.random((1, 1, 5, 5, 5))), Tensor(rng.random((1, 1, 5, 5, 5)))
    vals = [combined_loss(y, yh, lam).item() for lam in (0.0, 0.35, 0.7, 1.4)]
    assert vals[0] > 0 and all(b > a for a, b in zip(vals, vals[1:]))


def test_gradcheck_away_from_ties():
    rng = np.random.default_rng(4)
    y = rng.random((1, 1, 4, 4, 4))
    yh = y + np.where(rng.random(y.shape) < 0.5, -1, 1) * rng.uniform(0.3, 1.0, y.shape)
    rep = grad_check(lambda p: combined_loss(Tensor(y), p, 0.7), [yh], tol=1e-3)
    assert rep.passed, str(rep)
