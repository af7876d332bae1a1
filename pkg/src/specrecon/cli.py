"""``specrecon`` command line: data generation, training, inference and reports.

Exit codes: 0 success, 1 failed check, 2 usage or configuration error,
3 unreadable or malformed file, 4 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .data import (
    MATERIALS, WAVELENGTHS, DegradeConfig, default_response, load_cube, load_dataset,
    load_response, load_rgb, save_cube, save_png8, write_dataset,
)
from .errors import ConfigError, FormatError, ShapeError, TrainingError
from .gradsuite import run_suite
from .metrics import ensemble_average, evaluate, write_summary_csv
from .model import WIDTH_SCALES, ArchConfig, load_checkpoint, model_report, predict
from .train import TrainConfig, load_config, select_best_epoch, train

RENDER_BANDS = (400, 410, 420, 500, 600, 700)

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_FORMAT, EXIT_DIVERGED = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _size(text):
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use N or HxW") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) <= 0:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use N or HxW")
    return dims


def _announce(command, **resolved):
    """Print the resolved configuration and seed as one JSON line."""
    print(json.dumps({"command": command, **resolved}, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _cube_dir(path):
    path = Path(path)
    return path / "cubes" if (path / "cubes").is_dir() else path


def _response_for(args, root=None):
    if getattr(args, "response", None):
        return load_response(args.response)
    if root is not None and (Path(root) / "response.csv").exists():
        return load_response(Path(root) / "response.csv")
    return default_response()


def _load_cubes(directory):
    paths = sorted(_cube_dir(directory).glob("*.hsc"))
    if not paths:
        raise FormatError("no .hsc cubes found", _cube_dir(directory))
    return {p.stem: load_cube(p) for p in paths}


def _pad_multiple(rgb, multiple=8, minimum=16):
    """Reflect-pad the bottom/right edges up to a multiple of 8 (at least 16)."""
    _, H, W = rgb.shape
    th = max(minimum, -(-H // multiple) * multiple)
    tw = max(minimum, -(-W // multiple) * multiple)
    mode = "reflect" if min(H, W) > 1 else "edge"
    return np.pad(rgb, ((0, 0), (0, th - H), (0, tw - W)), mode=mode), (H, W)


def infer_array(rgb, params):
    """Predict a cube for an RGB image of any size via pad-and-crop."""
    padded, (H, W) = _pad_multiple(np.asarray(rgb, dtype=np.float32))
    return predict(padded, params)[:, :H, :W]


def _predict_dataset(checkpoint, root, track):
    params = load_checkpoint(checkpoint)
    return {s.name: infer_array(s.rgb, params) for s in load_dataset(root, track)}


def _band_tint(nm):
    """Visible-light color of a wavelength (piecewise-linear approximation)."""
    if nm < 440:
        r, g, b = (440 - nm) / 60, 0.0, 1.0
    elif nm < 490:
        r, g, b = 0.0, (nm - 440) / 50, 1.0
    elif nm < 510:
        r, g, b = 0.0, 1.0, (510 - nm) / 20
    elif nm < 580:
        r, g, b = (nm - 510) / 70, 1.0, 0.0
    elif nm < 645:
        r, g, b = 1.0, (645 - nm) / 65, 0.0
    else:
        r, g, b = 1.0, 0.0, 0.0
    # dim toward the ends of the visible range
    fade = 0.3 + 0.7 * (nm - 380) / 40 if nm < 420 else (
        0.3 + 0.7 * (780 - nm) / 80 if nm > 700 else 1.0)
    return np.array([r, g, b]) * fade


def render_band(cube, nm):
    """One band as an (H, W, 3) uint8 image: clamped intensity times the band's tint."""
    idx = int(np.argmin(np.abs(WAVELENGTHS - nm)))
    if abs(WAVELENGTHS[idx] - nm) > 1e-9:
        raise ConfigError(f"{nm} nm is not a band center (400-700 nm in 10 nm steps)")
    level = np.clip(cube[idx], 0.0, 1.0)[..., None]
    return np.round(255 * level * _band_tint(nm)).astype(np.uint8)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    degrade = DegradeConfig(noise_sigma=args.noise_sigma, mosaic=not args.no_mosaic)
    _announce("gen-data", seed=args.seed, count=args.count, size=list(args.size), out=args.out,
              degrade=asdict(degrade), materials=args.materials)
    names = write_dataset(args.out, args.count, args.size, args.seed, degrade=degrade,
                          materials=args.materials)
    print(f"wrote {len(names)} scenes to {args.out}")
    return EXIT_OK


def _train_configs(args):
    cfg, arch = TrainConfig(), ArchConfig()
    if args.config:
        cfg, arch = load_config(args.config, cfg, arch)
    overrides = {k: v for k, v in {
        "seed": args.seed, "epochs": args.epochs, "batch_size": args.batch,
        "patch_size": args.patch, "track": args.track, "base_lr": args.lr,
        "train_dir": args.train_dir, "val_dir": args.val_dir, "out_dir": args.out,
    }.items() if v is not None}
    cfg = replace(cfg, **overrides)
    arch_over = {k: v for k, v in {"width_scale": args.width_scale,
                                   "base_width": args.base_width}.items() if v is not None}
    arch = replace(arch, **arch_over)
    cfg.validate()
    arch.validate()
    if cfg.train_dir is None:
        raise UsageError("train needs --train-dir (or train_dir in --config)")
    return cfg, arch


def cmd_train(args):
    cfg, arch = _train_configs(args)
    _announce("train", seed=cfg.seed, train=asdict(cfg), arch=arch.to_dict())
    params = load_checkpoint(args.checkpoint, requires_grad=True) if args.checkpoint else None
    if params is not None and params.arch != arch:
        raise UsageError(f"{args.checkpoint}: architecture differs from the resolved config")
    _, log = train(cfg, arch, params=params)
    if any(r.mrae is not None for r in log.records):
        epoch, path = select_best_epoch(log)
        print(f"best epoch {epoch}: {path or '(not saved)'}")
    return EXIT_OK


def cmd_infer(args):
    _announce("infer", seed=None, checkpoint=args.checkpoint, inputs=args.inputs, out=args.out)
    params = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    single = len(args.inputs) == 1 and out.suffix == ".hsc"
    if not single:
        out.mkdir(parents=True, exist_ok=True)
    for src in args.inputs:
        cube = infer_array(load_rgb(src), params)
        dest = out if single else out / f"{Path(src).stem}.hsc"
        save_cube(dest, cube)
        print(f"{src} -> {dest} {cube.shape}")
    return EXIT_OK


def _evaluate_named(preds, gts, resp, out):
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise FormatError(f"no prediction for {', '.join(missing)}")
    names = sorted(gts)
    report = evaluate([preds[n] for n in names], [gts[n] for n in names], resp, names=names)
    if out:
        report.to_csv(out)
    return report


def cmd_eval(args):
    if (args.pred is None) == (args.checkpoint is None):
        raise UsageError("eval needs exactly one of --pred or --checkpoint")
    _announce("eval", seed=None, gt=args.gt, pred=args.pred, checkpoint=args.checkpoint,
              track=args.track, out=args.out)
    resp = _response_for(args, args.gt)
    gts = _load_cubes(args.gt)
    preds = (_load_cubes(args.pred) if args.pred
             else _predict_dataset(args.checkpoint, args.gt, args.track))
    print(_evaluate_named(preds, gts, resp, args.out).table())
    return EXIT_OK


def cmd_ensemble(args):
    sources = (args.checkpoint or []) + (args.pred or [])
    if not sources:
        raise UsageError("ensemble needs --checkpoint or --pred members")
    _announce("ensemble", seed=None, gt=args.gt, members=sources, track=args.track, out=args.out)
    resp = _response_for(args, args.gt)
    gts = _load_cubes(args.gt)
    members = [_predict_dataset(c, args.gt, args.track) for c in args.checkpoint or []]
    members += [_load_cubes(p) for p in args.pred or []]
    rows = []
    for label, preds in zip(sources, members):
        rep = _evaluate_named(preds, gts, resp, None)
        rows.append({"label": label, "mrae": rep.mrae, "rmse": rep.rmse, "bpmrae": rep.bpmrae})
    fused = {n: ensemble_average([m[n] for m in members]) for n in gts}
    rep = _evaluate_named(fused, gts, resp, None)
    rows.append({"label": "ensemble", "mrae": rep.mrae, "rmse": rep.rmse, "bpmrae": rep.bpmrae})
    best = min(rows[:-1], key=lambda r: r["mrae"])
    mean = float(np.mean([r["mrae"] for r in rows[:-1]]))
    print(f"ensemble MRAE {rep.mrae:.6f}  best member {best['mrae']:.6f} ({best['label']})  "
          f"member mean {mean:.6f}")
    if args.out:
        write_summary_csv(args.out, rows)
    return EXIT_OK


def cmd_render(args):
    bands = [int(b) for b in args.bands.split(",")] if args.bands else list(RENDER_BANDS)
    _announce("render", seed=None, inputs=args.inputs, bands=bands, out=args.out)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for src in args.inputs:
        cube = load_cube(src)
        for nm in bands:
            dest = out / f"{Path(src).stem}_{nm}nm.png"
            save_png8(dest, render_band(cube, nm))
        print(f"{src}: {len(bands)} bands -> {out}")
    return EXIT_OK


def cmd_report(args):
    scales = [args.width_scale] if args.width_scale else list(WIDTH_SCALES)
    _announce("report", seed=None, size=list(args.size), base_width=args.base_width,
              width_scales=scales, out=args.out)
    rows = []
    for s in scales:
        rep = model_report(ArchConfig(base_width=args.base_width, width_scale=s), args.size)
        rows.append({"width_scale": s, **rep.as_row()})
    fields = list(rows[0])
    print("  ".join(f"{f:>14}" for f in fields))
    for r in rows:
        print("  ".join(f"{r[f]:>14.6g}" for f in fields))
    if args.out:
        write_summary_csv(args.out, rows, fields)
    return EXIT_OK


def cmd_grad_check(args):
    seeds = list(range(args.seed, args.seed + args.seeds))
    _announce("grad-check", seed=args.seed, seeds=seeds, tolerance=args.tolerance, step=args.step)
    results, seconds = run_suite(seeds, tolerance=args.tolerance, step=args.step)
    ok = True
    rows = []
    for r in results:
        ok &= r.report.passed
        rows.append({"op": r.name, "seed": r.seed, "max_rel_err": r.report.max_rel_err,
                     "checked": r.report.checked, "passed": r.report.passed})
        print(f"{r.name:<22} seed {r.seed}  max rel err {r.report.max_rel_err:.3e}  "
              f"{'ok' if r.report.passed else 'FAIL'}")
    print(f"{len(results)} checks in {seconds:.1f}s: {'all passed' if ok else 'FAILURES'}")
    if args.out:
        write_summary_csv(args.out, rows, list(rows[0]))
    return EXIT_OK if ok else EXIT_FAILED


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="specrecon", description=__doc__.splitlines()[0])
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic cube/RGB pairs")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=_size, default=(64, 64), help="N or HxW (default 64)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--noise-sigma", type=float, default=0.01)
    g.add_argument("--no-mosaic", action="store_true")
    g.add_argument("--materials", type=int, default=MATERIALS,
                   help="size of the shared spectrum library; 0 draws every region afresh")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--config", help="INI file with [train] and [arch] sections")
    t.add_argument("--train-dir")
    t.add_argument("--val-dir")
    t.add_argument("--out", help="directory for checkpoints and log.csv")
    t.add_argument("--checkpoint", help="resume from these weights")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--patch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--width-scale", type=float, choices=WIDTH_SCALES)
    t.add_argument("--base-width", type=int)
    t.add_argument("--track", choices=("clean", "real"))
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="reconstruct cubes from RGB images")
    i.add_argument("inputs", nargs="+", help="RGB .png or .hsc files")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", required=True, help="output directory, or a .hsc path for one input")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground-truth cubes")
    e.add_argument("--gt", required=True, help="dataset root or directory of .hsc cubes")
    e.add_argument("--pred", help="directory of predicted .hsc cubes")
    e.add_argument("--checkpoint", help="predict from the dataset RGB with this model")
    e.add_argument("--track", choices=("clean", "real"), default="clean")
    e.add_argument("--response", help="camera response CSV")
    e.add_argument("--out", help="CSV path")
    e.set_defaults(func=cmd_eval)

    en = sub.add_parser("ensemble", help="average several members and score them")
    en.add_argument("--gt", required=True)
    en.add_argument("--checkpoint", action="append")
    en.add_argument("--pred", action="append")
    en.add_argument("--track", choices=("clean", "real"), default="clean")
    en.add_argument("--response")
    en.add_argument("--out", help="CSV path")
    en.set_defaults(func=cmd_ensemble)

    r = sub.add_parser("render", help="pseudo-color PNGs of single bands")
    r.add_argument("inputs", nargs="+", help=".hsc cubes")
    r.add_argument("--out", required=True)
    r.add_argument("--bands", help="comma-separated wavelengths in nm "
                                   "(default 400,410,420,500,600,700)")
    r.set_defaults(func=cmd_render)

    rp = sub.add_parser("report", help="MACs, parameters and weight size per width scale")
    rp.add_argument("--size", type=_size, default=(482, 512))
    rp.add_argument("--base-width", type=int, default=64)
    rp.add_argument("--width-scale", type=float, choices=WIDTH_SCALES)
    rp.add_argument("--out", help="CSV path")
    rp.set_defaults(func=cmd_report)

    gc = sub.add_parser("grad-check", help="finite-difference check of every op")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--seeds", type=int, default=5)
    gc.add_argument("--tolerance", type=float, default=1e-3)
    gc.add_argument("--step", type=float, default=1e-4)
    gc.add_argument("--out", help="CSV path")
    gc.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ShapeError) as exc:
        print(f"specrecon {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"specrecon {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except TrainingError as exc:
        print(f"specrecon {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
