"""Command-line entry point: learn-dict, render, reconstruct, evaluate, plot, merl-slice.

Exit codes: 0 success, 2 validation error, 3 iteration budget exhausted, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import formats
from .brdf import BrdfCurve, fit_curve, learn_dictionary, merl_colocated_slice
from .evaluation import evaluate, trace_export
from .pipeline import ConfigError, load_dataset, render_scene, solver_config_from_dict, with_overrides
from .solver import SolverError, reconstruct

EXIT_OK, EXIT_VALIDATION, EXIT_BUDGET, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("colocmvps")


class BudgetExhausted(Exception):
    pass


def _threads(n):
    if n is None:
        return None
    if n < 0:
        raise ConfigError("--threads must be >= 0")
    return n or (os.cpu_count() or 1)


def _out_dir(args, default=None) -> Path:
    out = Path(args.out or default or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- learn-dict -----------------------------------------------------------------------


def cmd_learn_dict(args):
    curves, names = [], []
    for p in args.curves:
        curves.append(formats.read_curve(p))
        names.append(str(p))
    if args.merl_dir:
        for p in sorted(Path(args.merl_dir).glob("*.binary")):
            curves.append(merl_colocated_slice(p.read_bytes()))
            names.append(p.name)
    if not curves:
        raise ConfigError("no input curves")
    d = learn_dictionary(curves, args.n_bases)
    out = Path(args.out or "dictionary.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    formats.write_dictionary(out, d)
    if d.degenerate:
        print("warning: training set is rank deficient; dictionary flagged degenerate")
    for name, cv in zip(names, curves):
        c = fit_curve(d, cv, 0.0)
        err = np.abs(d.table(c) - cv.log_values).max()
        print(f"{name}: refit max |log error| = {err:.3e}")
    print(f"wrote {out} ({d.n_bases} bases, {d.theta_grid.size} nodes)")


# -- render -----------------------------------------------------------------------------


def cmd_render(args):
    if not args.config:
        raise ConfigError("render needs --config SCENE.yaml")
    scene = formats.load_yaml(args.config)
    base = Path(args.config).parent
    syn = render_scene(scene, base, threads=_threads(args.threads) or 1)
    out = _out_dir(args)
    for i, r in enumerate(syn.renders):
        formats.write_pfm(out / f"view_{i:03d}.pfm", r.image.intensities)
        formats.write_camera(out / f"view_{i:03d}.cam", r.image.camera)
    gt = out / "gt"
    gt.mkdir(exist_ok=True)
    ref = syn.gt
    formats.write_pfm(gt / "depth.pfm", np.where(ref.hit, ref.depth, 0.0))
    formats.write_pfm(gt / "normals.pfm", ref.normals)
    formats.write_pfm(gt / "mask.pfm", ref.hit.astype(np.float32))
    formats.write_curve(out / "brdf_gt.csv", syn.curve)
    formats.write_dictionary(out / "dictionary.txt", syn.dictionary)
    formats.write_coefficients(out / "brdf_gt.json", syn.c, np.log(syn.gamma))
    print(f"rendered {len(syn.renders)} views to {out}")


# -- reconstruct ----------------------------------------------------------------------------


def cmd_reconstruct(args):
    if not args.config:
        raise ConfigError("reconstruct needs --config RUN.yaml")
    raw = formats.load_yaml(args.config)
    base = Path(args.config).parent
    cfg = with_overrides(solver_config_from_dict(raw), args.seed, _threads(args.threads))
    for key in ("dataset", "dictionary"):
        if key not in raw:
            raise ConfigError(f"config is missing {key!r}")
    data_dir = base / raw["dataset"]
    mask = base / raw["mask"] if "mask" in raw else None
    dataset = load_dataset(data_dir, mask)
    dictionary = formats.read_dictionary(base / raw["dictionary"])
    try:
        cfg.validate(len(dataset.views))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args, base / raw["output"] if "output" in raw else None)

    t0 = time.time()

    def progress(outer, phase, sigma, energy, gap):
        log.info("[%7.1fs] outer %d %-5s sigma=%.3g E=%.6g gap=%.3g", time.time() - t0, outer, phase, sigma, energy, gap)

    rec = reconstruct(dataset, dictionary, cfg, callback=progress)
    est = rec.estimate
    ref_cam = dataset.reference.camera
    formats.write_pfm(out / "depth.pfm", np.where(est.mask, est.depth, 0.0))
    formats.write_pfm(out / "normals.pfm", np.where(est.mask[..., None], est.normals, 0.0))
    formats.write_pfm(out / "mask.pfm", est.mask.astype(np.float32))
    pts = est.points(ref_cam)[est.mask]
    formats.write_ply(out / "points.ply", pts, est.normals[est.mask])
    formats.write_coefficients(out / "brdf.json", rec.c, rec.log_gamma, converged=rec.converged)
    (out / "trace.csv").write_text(trace_export(rec.trace))
    formats.write_normal_png(out / "normals.png", est.normals, est.mask)
    print(f"wrote reconstruction to {out} (converged={rec.converged})")
    if not rec.converged:
        raise BudgetExhausted("iteration budget exhausted before convergence; partial outputs written")


# -- evaluate ---------------------------------------------------------------------------


def cmd_evaluate(args):
    est_dir, gt_dir = Path(args.est_dir), Path(args.gt_dir)
    est_n = formats.read_pfm(est_dir / "normals.pfm")
    est_z = formats.read_pfm(est_dir / "depth.pfm")
    est_m = formats.read_pfm(est_dir / "mask.pfm") > 0.5
    gt_n = formats.read_pfm(gt_dir / "normals.pfm")
    gt_z = formats.read_pfm(gt_dir / "depth.pfm")
    gt_m = formats.read_pfm(gt_dir / "mask.pfm") > 0.5
    if est_z.shape != gt_z.shape:
        raise ConfigError(f"shape mismatch: estimate {est_z.shape} vs ground truth {gt_z.shape}")
    dictionary = c = curve = None
    if args.gt_brdf and args.dictionary and (est_dir / "brdf.json").exists():
        dictionary = formats.read_dictionary(args.dictionary)
        c, _, _ = formats.read_coefficients(est_dir / "brdf.json")
        curve = formats.read_curve(args.gt_brdf).resample(dictionary.theta_grid)
    rep = evaluate(est_z, est_n, est_m, gt_z, gt_n, gt_m, args.erode, dictionary, c, curve)
    text = rep.to_text("errors: normal in degrees, depth x1000 world units, BRDF |d log rho| x10")
    print(text, end="")
    out = _out_dir(args, est_dir)
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(rep.to_csv())


# -- plot ---------------------------------------------------------------------------------


def _svg(theta_deg, series, path):
    w, h, pad = 480, 320, 40
    ys = np.concatenate([s for _, s in series])
    lo, hi = float(ys.min()), float(ys.max())
    hi = hi if hi > lo else lo + 1.0

    def pts(y):
        px = pad + (theta_deg / 90.0) * (w - 2 * pad)
        py = h - pad - (y - lo) / (hi - lo) * (h - 2 * pad)
        return " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))

    colours = ["#1f77b4", "#d62728"]
    body = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
        f'<rect x="{pad}" y="{pad}" width="{w - 2 * pad}" height="{h - 2 * pad}" fill="none" stroke="#888"/>',
        f'<text x="{w / 2}" y="{h - 8}" text-anchor="middle" font-size="12">theta (deg)</text>',
        f'<text x="12" y="{h / 2}" font-size="12" transform="rotate(-90 12 {h / 2})">rho</text>',
    ]
    for (name, y), col in zip(series, colours):
        body.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts(y)}"><title>{name}</title></polyline>')
    body.append("</svg>")
    Path(path).write_text("\n".join(body) + "\n")


def cmd_plot(args):
    d = formats.read_dictionary(args.dictionary)
    c = np.zeros(d.n_bases)
    if args.coefficients:
        c, _, _ = formats.read_coefficients(args.coefficients)
    est = d.curve(c)
    theta_deg = np.degrees(d.theta_grid)
    cols = {"theta_deg": theta_deg, "rho": np.exp(est.log_values), "log_rho": est.log_values}
    if args.gt:
        gt = formats.read_curve(args.gt).resample(d.theta_grid)
        cols["rho_gt"] = np.exp(gt.log_values)
        cols["log_rho_gt"] = gt.log_values
    out = Path(args.out or "brdf.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix.lower() == ".svg":
        series = [("estimate", cols["rho"])] + ([("ground truth", cols["rho_gt"])] if args.gt else [])
        _svg(theta_deg, series, out)
    else:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(cols))
            for row in zip(*cols.values()):
                w.writerow([repr(float(v)) for v in row])
    print(f"wrote {out}")


# -- merl-slice ---------------------------------------------------------------------------


def cmd_merl_slice(args):
    curve = merl_colocated_slice(Path(args.merl_file).read_bytes())
    if args.dictionary:
        grid = formats.read_dictionary(args.dictionary).theta_grid
        curve = BrdfCurve(grid, curve.log_rho(grid))
    out = Path(args.out or Path(args.merl_file).with_suffix(".csv").name)
    out.parent.mkdir(parents=True, exist_ok=True)
    formats.write_curve(out, curve)
    print(f"wrote {out} ({curve.theta_grid.size} samples)")


# -- wiring -------------------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="YAML scene or run config")
    p.add_argument("--out", help="output directory or file")
    p.add_argument("--seed", type=int, help="RNG seed (unsigned 64-bit)")
    p.add_argument("--threads", type=int, help="worker threads (0 = all cores)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="colocmvps", description="Co-located multi-view photometric stereo.")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("learn-dict", help="learn a log-BRDF dictionary from curves")
    _common(p)
    p.add_argument("curves", nargs="*", help="curve CSV files")
    p.add_argument("--merl-dir", help="directory of MERL .binary files")
    p.add_argument("-n", "--n-bases", type=int, default=15)
    p.set_defaults(func=cmd_learn_dict)

    p = sub.add_parser("render", help="render a synthetic scene")
    _common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("reconstruct", help="reconstruct shape and BRDF")
    _common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="compare a reconstruction with ground truth")
    _common(p)
    p.add_argument("est_dir")
    p.add_argument("gt_dir")
    p.add_argument("--dictionary")
    p.add_argument("--gt-brdf", help="ground-truth curve CSV")
    p.add_argument("--erode", type=int, default=2)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="tabulate or draw rho(theta)")
    _common(p)
    p.add_argument("--dictionary", required=True)
    p.add_argument("--coefficients", help="brdf.json from reconstruct")
    p.add_argument("--gt", help="ground-truth curve CSV")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("merl-slice", help="extract the co-located slice of a MERL file")
    _common(p)
    p.add_argument("merl_file")
    p.add_argument("--dictionary", help="resample onto this dictionary's grid")
    p.set_defaults(func=cmd_merl_slice)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        args.func(args)
    except BudgetExhausted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, SolverError, ValueError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
