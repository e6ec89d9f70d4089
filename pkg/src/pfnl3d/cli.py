"""Single ``pfnl3d`` command with one subcommand per pipeline step.

Exit codes: 0 success, 1 usage error, 2 data or validation error. Every
file written gets a ``<file>.prov`` sidecar recording the tool version, the
subcommand, its resolved options and the SHA-256 of each input, so the
artifact can be regenerated from the sidecar alone.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .degrade import DegradationRecipe, DegradeConfig, apply_recipe, degrade_second_order
from .gradcheck import run_suite
from .metrics import MetricReport, MetricRow, dice, nsd, psnr, ssim3d, wilcoxon_signed_rank
from .model import enhance, load_checkpoint
from .nifti import read_nifti, write_nifti
from .train import load_cases, parse_config, train
from .volume import PHASE_ALIASES, Volume, make_phantom

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
PROV_SUFFIX = ".prov"
RECIPE_SUFFIX = ".recipe"

log = logging.getLogger("pfnl3d")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_provenance(output, command: str, options: dict, inputs: Sequence = ()) -> Path:
    """Write ``output + '.prov'``; deterministic (no timestamps, no hostnames)."""
    lines = ["tool=pfnl3d", f"version={__version__}", f"command={command}", f"output={Path(output).name}"]
    for k in sorted(options):
        v = options[k]
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"config.{k}={v}")
    for i, p in enumerate(inputs):
        lines.append(f"input{i}={p}")
        lines.append(f"input{i}.sha256={_sha256(p)}")
    path = Path(str(output) + PROV_SUFFIX)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _dims_arg(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be N or D,H,W, got {text!r}") from None
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"dims must be N or D,H,W, got {text!r}")
    return tuple(vals)


def _phase_arg(text: str) -> str:
    if text not in PHASE_ALIASES:
        raise argparse.ArgumentTypeError(f"unknown phase {text!r}; choose from {sorted(PHASE_ALIASES)}")
    return PHASE_ALIASES[text]


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args) -> int:
    v = make_phantom(args.seed, args.dims, args.phase, spacing=args.spacing)
    write_nifti(v, args.out)
    opts = {"seed": args.seed, "dims": args.dims, "phase": args.phase, "spacing": args.spacing}
    write_provenance(args.out, "phantom", opts)
    return EXIT_OK


def _degrade_config(args) -> DegradeConfig:
    kw = {}
    for name in ("p_blur", "p_resize", "p_noise", "p_anisotropic", "p_poisson"):
        if getattr(args, name) is not None:
            kw[name] = getattr(args, name)
    for name in ("blur_sigma", "gaussian_sigma", "poisson_scale", "resize_scale"):
        if getattr(args, name) is not None:
            kw[name] = tuple(getattr(args, name))
    return DegradeConfig(**kw)


def cmd_degrade(args) -> int:
    v = read_nifti(args.input, kind="volume")
    inputs = [args.input]
    if args.recipe:
        recipe = DegradationRecipe.from_text(Path(args.recipe).read_text(encoding="utf-8"))
        out = apply_recipe(v, recipe)
        inputs.append(args.recipe)
        opts = {"replay": True}
    else:
        cfg = _degrade_config(args)
        out, recipe = degrade_second_order(v, args.seed, args.final_scale, cfg)
        opts = {"seed": args.seed, "final_scale": args.final_scale}
        opts.update({k: getattr(cfg, k) for k in cfg.__dataclass_fields__})
    write_nifti(out, args.out)
    recipe_path = Path(str(args.out) + RECIPE_SUFFIX)
    recipe_path.write_text(recipe.to_text(), encoding="utf-8")
    write_provenance(args.out, "degrade", opts, inputs)
    write_provenance(recipe_path, "degrade", opts, inputs)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    if args.out_dir:
        cfg = replace(cfg, out_dir=args.out_dir)
    if not cfg.out_dir:
        raise ValueError("train needs an output directory (out_dir in the config or --out-dir)")
    cases, val = load_cases(cfg)
    result = train(cfg, cases, val, cfg.out_dir)
    opts = asdict(cfg)
    out = Path(cfg.out_dir)
    for p in sorted(out.iterdir()):
        if p.is_file() and not p.name.endswith(PROV_SUFFIX):
            write_provenance(p, "train", opts, [args.config])
    log.info("trained %d steps; best validation PSNR %.3f", result.checkpoint.step, result.best_val_psnr)
    return EXIT_OK


def cmd_enhance(args) -> int:
    ckpt = load_checkpoint(args.model)
    vols = [read_nifti(p, kind="volume") for p in (args.nc, args.art, args.pv)]
    dims = {v.dims for v in vols}
    if len(dims) != 1:
        raise ValueError("input dimension mismatch: " + ", ".join(f"{n}={v.dims}" for n, v in zip(("nc", "art", "pv"), vols)))
    pv = vols[-1]
    r = ckpt.config.scale
    out = enhance(ckpt.params, ckpt.config, *(v.data.astype(np.float32) for v in vols), tile=args.tile)
    spacing = tuple(s / r for s in pv.spacing)
    # inverse of the low-resolution grid placement used by degrade
    origin = tuple(o - s / 2 + sh / 2 for o, s, sh in zip(pv.origin, pv.spacing, spacing))
    write_nifti(Volume(out.astype(np.float32), spacing, origin), args.out)
    write_provenance(args.out, "enhance", {"tile": args.tile or 0}, [args.model, args.nc, args.art, args.pv])
    return EXIT_OK


def _emit(text: str, out, command: str, opts: dict, inputs) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
        write_provenance(out, command, opts, inputs)
    else:
        sys.stdout.write(text)


def cmd_metrics(args) -> int:
    ref = read_nifti(args.ref, kind="volume")
    test = read_nifti(args.test, kind="volume")
    fn = psnr if args.metric == "psnr" else ssim3d
    value = fn(ref, test, data_range=args.data_range)
    _emit(f"{args.metric}={value!r}\n", args.out, "metrics", {"metric": args.metric, "data_range": args.data_range}, [args.ref, args.test])
    return EXIT_OK


def cmd_seg_eval(args) -> int:
    pred = read_nifti(args.pred, kind="mask")
    ref = read_nifti(args.ref, kind="mask")
    row = MetricRow(case=args.case or Path(args.pred).name, dice=dice(pred, ref), nsd=nsd(pred, ref, args.tau))
    report = MetricReport([row], tau=args.tau)
    _emit(report.to_csv(), args.out, "seg-eval", {"tau": args.tau}, [args.pred, args.ref])
    return EXIT_OK


def read_single_column_csv(path) -> list[float]:
    """Values of a one-column CSV whose first row is a header."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise ValueError(f"{path}: expected a header row and at least one value")
    vals = []
    for n, r in enumerate(rows[1:], start=2):
        if len(r) != 1:
            raise ValueError(f"{path}:{n}: expected one column, got {len(r)}")
        try:
            vals.append(float(r[0]))
        except ValueError:
            raise ValueError(f"{path}:{n}: not a number: {r[0]!r}") from None
        if not math.isfinite(vals[-1]):
            raise ValueError(f"{path}:{n}: non-finite value")
    return vals


def cmd_wilcoxon(args) -> int:
    a, b = read_single_column_csv(args.a), read_single_column_csv(args.b)
    if len(a) != len(b):
        raise ValueError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    res = wilcoxon_signed_rank(a, b)
    text = (
        "n_effective,w,w_plus,w_minus,p_two_sided,method\n"
        f"{res.n_effective},{res.w!r},{res.w_plus!r},{res.w_minus!r},{res.p_two_sided!r},{res.method}\n"
    )
    _emit(text, args.out, "wilcoxon", {}, [args.a, args.b])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = run_suite(tuple(args.seeds), include_model=not args.ops_only)
    for r in reports:
        print(r)
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return EXIT_OK if not failed else EXIT_DATA


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pfnl3d", description="Multi-phase CT restoration toolkit.")
    p.add_argument("--version", action="version", version=f"pfnl3d {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("phantom", help="write a synthetic abdomen phantom")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dims", type=_dims_arg, default=(48, 48, 48), help="N or D,H,W")
    s.add_argument("--phase", type=_phase_arg, default="portal_venous", help="nc, art or pv (or full name)")
    s.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0), metavar=("SZ", "SY", "SX"))
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("degrade", help="second-order degradation with a recipe sidecar")
    s.add_argument("input")
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--final-scale", type=int, default=4, choices=(1, 2, 4))
    s.add_argument("--recipe", help="replay this recipe instead of sampling one")
    for name in ("p-blur", "p-resize", "p-noise", "p-anisotropic", "p-poisson"):
        s.add_argument(f"--{name}", type=float, default=None)
    for name in ("blur-sigma", "gaussian-sigma", "poisson-scale", "resize-scale"):
        s.add_argument(f"--{name}", type=float, nargs=2, default=None, metavar=("LO", "HI"))
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("train", help="train from a key=value config")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", help="overrides out_dir from the config")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("enhance", help="restore a portal-venous volume from three phases")
    s.add_argument("--model", required=True)
    s.add_argument("--nc", required=True)
    s.add_argument("--art", required=True)
    s.add_argument("--pv", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tile", type=int, default=None, help="low-resolution tile extent")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("metrics", help="PSNR or SSIM between two volumes")
    s.add_argument("metric", choices=("psnr", "ssim"))
    s.add_argument("ref")
    s.add_argument("test")
    s.add_argument("--data-range", type=float, default=1.0)
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("seg-eval", help="Dice and NSD between two masks")
    s.add_argument("--tau", type=float, default=2.0, help="NSD tolerance in mm")
    s.add_argument("--case", help="case label in the report")
    s.add_argument("pred")
    s.add_argument("ref")
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_seg_eval)

    s = sub.add_parser("wilcoxon", help="paired signed-rank test on two single-column CSVs")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_wilcoxon)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--ops-only", action="store_true", help="skip the end-to-end network check")
    s.set_defaults(func=cmd_gradcheck)
    return p


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("pfnl3d: a subcommand is required")
    except UsageError as e:
        print(e, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, FloatingPointError) as e:
        print(f"pfnl3d {args.command}: error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())
