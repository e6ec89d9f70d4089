import numpy as np
import pytest

from pfnl3d import __version__
from pfnl3d.cli import dispatch
from pfnl3d.model import Checkpoint, PfnlConfig, save_checkpoint, zero_params
from pfnl3d.nifti import read_nifti, write_nifti
from pfnl3d.volume import Mask


def run(*argv):
    return dispatch([str(a) for a in argv])


def test_phantom_deterministic_with_sidecar(tmp_path):
    a, b = tmp_path / "a.nii", tmp_path / "b.nii"
    assert run("phantom", "--seed", 7, "--dims", 32, "--phase", "pv", "-o", a) == 0
    assert run("phantom", "--seed", 7, "--dims", 32, "--phase", "pv", "-o", b) == 0
    assert a.read_bytes() == b.read_bytes()
    prov = (tmp_path / "a.nii.prov").read_text()
    assert f"version={__version__}" in prov and "config.seed=7" in prov and "config.phase=portal_venous" in prov
    assert read_nifti(a).dims == (32, 32, 32)


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run("phantom", "--bogus", "-o", tmp_path / "x.nii") == 1
    assert run("nosuch") == 1
    assert run() == 1
    assert run("phantom", "--phase", "delayed", "-o", tmp_path / "x.nii") == 1
    assert "delayed" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path, capsys):
    assert run("metrics", "psnr", tmp_path / "missing.nii", tmp_path / "other.nii") == 2
    assert run("phantom", "--dims", 8, "-o", tmp_path / "small.nii") == 2
    cfg = tmp_path / "c.txt"
    cfg.write_text("unknown_key=1\n")
    assert run("train", "--config", cfg, "--out-dir", tmp_path / "o") == 2
    assert "unknown_key" in capsys.readouterr().err


def test_degrade_recipe_and_replay(tmp_path):
    src = tmp_path / "pv.nii"
    run("phantom", "--seed", 1, "--dims", 32, "-o", src)
    out = tmp_path / "lr.nii"
    assert run("degrade", src, "-o", out, "--seed", 5, "--final-scale", 2, "--p-noise", 1.0, "--gaussian-sigma", 0.01, 0.02) == 0
    recipe = tmp_path / "lr.nii.recipe"
    assert "seed=5" in recipe.read_text()
    assert "config.p_noise=1.0" in (tmp_path / "lr.nii.prov").read_text()
    assert read_nifti(out).dims == (16, 16, 16)
    rep = tmp_path / "replay.nii"
    assert run("degrade", src, "-o", rep, "--recipe", recipe) == 0
    assert rep.read_bytes() == out.read_bytes()
    assert run("degrade", src, "-o", out, "--p-blur", 1.5) == 2


def _pipeline(tmp_path):
    for ph in ("nc", "art", "pv"):
        run("phantom", "--seed", 3, "--dims", 32, "--phase", ph, "-o", tmp_path / f"{ph}.nii")
        run("degrade", tmp_path / f"{ph}.nii", "-o", tmp_path / f"lr_{ph}.nii", "--seed", 11, "--final-scale", 2)
    cfg = PfnlConfig(scale=2)
    save_checkpoint(Checkpoint(cfg, zero_params(cfg)), tmp_path / "zero.pfnl")


def test_enhance_and_mismatch(tmp_path, capsys):
    _pipeline(tmp_path)
    args = ["--model", tmp_path / "zero.pfnl", "--nc", tmp_path / "lr_nc.nii", "--art", tmp_path / "lr_art.nii"]
    assert run("enhance", *args, "--pv", tmp_path / "lr_pv.nii", "--out", tmp_path / "hr.nii") == 0
    hr = read_nifti(tmp_path / "hr.nii")
    ref = read_nifti(tmp_path / "pv.nii")
    assert hr.dims == ref.dims and hr.spacing == ref.spacing and hr.origin == ref.origin
    assert (tmp_path / "hr.nii.prov").exists()
    assert run("enhance", *args, "--pv", tmp_path / "pv.nii", "--out", tmp_path / "bad.nii") == 2
    assert "dimension mismatch" in capsys.readouterr().err


def test_metrics_and_seg_eval(tmp_path, capsys):
    _pipeline(tmp_path)
    capsys.readouterr()
    assert run("metrics", "psnr", tmp_path / "pv.nii", tmp_path / "pv.nii") == 0
    assert capsys.readouterr().out.strip() == "psnr=inf"
    assert run("metrics", "ssim", tmp_path / "pv.nii", tmp_path / "nc.nii", "-o", tmp_path / "s.txt") == 0
    assert (tmp_path / "s.txt").read_text().startswith("ssim=")
    a = np.zeros((8, 8, 8), np.uint8)
    a[2:6, 2:6, 2:6] = 1
    write_nifti(Mask(a), tmp_path / "a.nii")
    write_nifti(Mask(np.roll(a, 1, 2)), tmp_path / "b.nii")
    assert run("seg-eval", "--tau", 2.0, tmp_path / "a.nii", tmp_path / "b.nii", "--case", "c1") == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "case,psnr,ssim,dice,nsd,tau_mm"
    assert lines[1] == "c1,nan,nan,0.75,1.0,2.0"


def test_wilcoxon_cli(tmp_path, capsys):
    (tmp_path / "a.csv").write_text("dice\n" + "\n".join(str(v) for v in (1, 2, 3, 4, 5, 6)) + "\n")
    (tmp_path / "b.csv").write_text("dice\n" + "0\n" * 6)
    assert run("wilcoxon", tmp_path / "a.csv", tmp_path / "b.csv") == 0
    assert capsys.readouterr().out.splitlines()[1] == "6,0.0,21.0,0.0,0.03125,exact"
    (tmp_path / "c.csv").write_text("x\n1\n")
    assert run("wilcoxon", tmp_path / "a.csv", tmp_path / "c.csv") == 2
    (tmp_path / "d.csv").write_text("x,y\n1,2\n")
    assert run("wilcoxon", tmp_path / "d.csv", tmp_path / "d.csv") == 2


def test_train_cli(tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("channels=4\nn_pfrb=1\npatch=8\nphantom_dims=24\nbatch_size=1\nsteps_per_epoch=2\nepochs=1\n")
    out = tmp_path / "run"
    assert run("train", "--config", cfg, "--out-dir", out) == 0
    assert (out / "final.pfnl").exists() and (out / "final.pfnl.prov").exists()
    assert "config.channels=4" in (out / "loss_log.csv.prov").read_text()
    assert run("train", "--config", cfg) == 2  # no output directory


def test_gradcheck_cli(capsys):
    assert run("gradcheck", "--seeds", 0, "--ops-only") == 0
    assert "checks passed" in capsys.readouterr().out


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        run("--version")
    assert e.value.code == 0
    assert __version__ in capsys.readouterr().out
