import struct

import numpy as np
import pytest

from pfnl3d import autograd as ag
from pfnl3d.autograd import Tensor, backward
from pfnl3d.model import (
    CHECKPOINT_MAGIC,
    Checkpoint,
    CheckpointError,
    PfnlConfig,
    attention_stride,
    enhance,
    forward,
    init_params,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
    zero_params,
)
from pfnl3d.optim import AdamState

SMALL = PfnlConfig(channels=4, n_pfrb=1, scale=2, nonlocal_max_positions=64)


def _phases(rng, shape=(1, 1, 4, 4, 4)):
    return [Tensor(rng.random(shape).astype(np.float32)) for _ in range(3)]


def test_config_invariants():
    with pytest.raises(ValueError):
        PfnlConfig(channels=3)
    with pytest.raises(ValueError):
        PfnlConfig(n_pfrb=0)
    with pytest.raises(ValueError):
        PfnlConfig(scale=3)


def test_param_shapes_default_count():
    shapes = param_shapes(PfnlConfig())
    assert shapes["merge.w"] == (16 * 64, 48, 1, 1, 1)
    assert shapes["pfrb3.conv2.2.w"] == (16, 32, 3, 3, 3)
    assert len(shapes) == 4 * 2 + 2 + 4 * (3 * 2 + 2 + 3 * 2) + 4


def test_init_deterministic_zero_bias_and_he_std():
    cfg = PfnlConfig()
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()
        if k.endswith(".b"):
            assert not a[k].data.any()
    w = a["pfrb0.conv1.0.w"].data
    expect = np.sqrt(2.0 / (16 * 27))
    assert abs(w.std() / expect - 1) < 0.2


def test_forward_shape():
    rng = np.random.default_rng(0)
    cfg = PfnlConfig(scale=2)
    out = forward(init_params(cfg, 0), cfg, *_phases(rng, (1, 1, 8, 8, 8)))
    assert out.shape == (1, 1, 16, 16, 16)


@pytest.mark.parametrize("scale", [1, 2, 4])
def test_zero_params_give_skip_exactly(scale):
    rng = np.random.default_rng(1)
    cfg = PfnlConfig(channels=4, n_pfrb=2, scale=scale)
    xs = _phases(rng, (2, 1, 4, 5, 3))
    out = forward(zero_params(cfg), cfg, *xs).data
    assert out.tobytes() == ag.trilinear_upsample(xs[2], scale).data.tobytes()


def test_phase_order_matters():
    rng = np.random.default_rng(2)
    xs = _phases(rng)
    p = init_params(SMALL, 0)
    a = forward(p, SMALL, *xs).data
    b = forward(p, SMALL, xs[1], xs[0], xs[2]).data
    assert np.abs(a - b).max() > 0


def test_single_phase_ablation_finite():
    x = _phases(np.random.default_rng(3))[2]
    out = forward(init_params(SMALL, 1), SMALL, x, x, x).data
    assert np.all(np.isfinite(out))


def test_forward_deterministic():
    rng = np.random.default_rng(4)
    xs = _phases(rng)
    p = init_params(SMALL, 5)
    assert forward(p, SMALL, *xs).data.tobytes() == forward(p, SMALL, *xs).data.tobytes()


def test_every_parameter_receives_gradient():
    rng = np.random.default_rng(0)
    cfg = PfnlConfig(scale=2)
    p = init_params(cfg, 0)
    out = forward(p, cfg, *_phases(rng, (1, 1, 6, 6, 6)))
    backward(ag.l1_loss(out, Tensor(rng.random(out.shape).astype(np.float32))))
    dead = [k for k, t in p.items() if not np.any(t.grad)]
    assert not dead


def test_input_validation():
    rng = np.random.default_rng(5)
    xs = _phases(rng)
    with pytest.raises(ValueError):
        forward(init_params(SMALL), SMALL, xs[0], xs[1])
    with pytest.raises(ValueError):
        forward(init_params(SMALL), SMALL, xs[0], xs[1], Tensor(np.zeros((1, 1, 4, 4, 5), np.float32)))


def test_attention_stride():
    assert attention_stride((16, 16, 16), 4096) == 1
    assert attention_stride((17, 16, 16), 4096) == 2
    assert attention_stride((24, 24, 24), 64) == 6


def test_forward_with_strided_attention_runs():
    rng = np.random.default_rng(6)
    cfg = PfnlConfig(channels=4, n_pfrb=1, scale=1, nonlocal_max_positions=8)
    out = forward(init_params(cfg, 0), cfg, *_phases(rng, (1, 1, 5, 5, 5)))
    assert out.shape == (1, 1, 5, 5, 5) and np.all(np.isfinite(out.data))


def test_enhance_tiled_matches_untiled_skip_and_zero_model():
    rng = np.random.default_rng(7)
    cfg = PfnlConfig(channels=4, n_pfrb=1, scale=2, nonlocal_max_positions=4096)
    vols = [rng.random((10, 9, 11)).astype(np.float32) for _ in range(3)]
    skip = ag.trilinear_upsample(Tensor(vols[2][None, None]), 2).data[0, 0]
    out = enhance(zero_params(cfg), cfg, *vols, tile=4)
    assert out.tobytes() == skip.tobytes()
    trained = enhance(init_params(cfg, 1), cfg, *vols, tile=4)
    assert trained.shape == (20, 18, 22) and np.all(np.isfinite(trained))


# ---------------------------------------------------------------------------
# checkpoints


def _ckpt(with_opt=True):
    p = init_params(SMALL, 7)
    opt = None
    if with_opt:
        opt = AdamState.zeros_like(p)
        rng = np.random.default_rng(8)
        for k in opt.m:
            opt.m[k][...] = rng.standard_normal(opt.m[k].shape)
            opt.v[k][...] = rng.random(opt.v[k].shape)
        opt.t = 17
    return Checkpoint(SMALL, p, 123, opt)


@pytest.mark.parametrize("with_opt", [True, False])
def test_checkpoint_round_trip(tmp_path, with_opt):
    c = _ckpt(with_opt)
    path = tmp_path / "c.pfnl"
    save_checkpoint(c, path)
    d = load_checkpoint(path)
    assert d.config == c.config and d.step == 123 and d.version == 1
    assert list(d.params) == list(c.params)
    for k in c.params:
        assert d.params[k].data.tobytes() == c.params[k].data.tobytes()
    if with_opt:
        assert d.optimizer.t == 17
        for k in c.params:
            assert d.optimizer.m[k].tobytes() == c.optimizer.m[k].tobytes()
            assert d.optimizer.v[k].tobytes() == c.optimizer.v[k].tobytes()
    else:
        assert d.optimizer is None
    save_checkpoint(d, tmp_path / "again.pfnl")
    assert (tmp_path / "again.pfnl").read_bytes() == path.read_bytes()


def test_checkpoint_header_layout(tmp_path):
    path = tmp_path / "c.pfnl"
    save_checkpoint(_ckpt(False), path)
    raw = path.read_bytes()
    assert raw[:8] == CHECKPOINT_MAGIC
    assert struct.unpack_from("<I", raw, 8) == (1,)
    assert struct.unpack_from("<5I", raw, 12) == (3, 4, 1, 2, 64)
    assert struct.unpack_from("<I", raw, 32) == (len(param_shapes(SMALL)),)
    (n,) = struct.unpack_from("<H", raw, 36)
    assert raw[38 : 38 + n] == b"nonlocal.theta.w"


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "c.pfnl"
    save_checkpoint(_ckpt(), path)
    raw = bytearray(path.read_bytes())

    bad = bytearray(raw)
    struct.pack_into("<I", bad, 8, 2)
    (tmp_path / "v.pfnl").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.pfnl")

    bad = bytearray(raw)
    bad[0] = ord("X")
    (tmp_path / "m.pfnl").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "m.pfnl")

    # tampered length field of the first tensor name
    bad = bytearray(raw)
    struct.pack_into("<H", bad, 36, 60000)
    (tmp_path / "t.pfnl").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.pfnl")

    (tmp_path / "s.pfnl").write_bytes(bytes(raw[:-10]))
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "s.pfnl")

    # config says 8 channels but tensors are for 4
    bad = bytearray(raw)
    struct.pack_into("<I", bad, 16, 8)
    (tmp_path / "c8.pfnl").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_checkpoint(tmp_path / "c8.pfnl")

    (tmp_path / "x.pfnl").write_bytes(bytes(raw) + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "x.pfnl")
