"""Acceptance criteria 1-9, one test each; the terminal summary lists PASS/FAIL per criterion.

Criteria 4 and 5 train three desk-scale models (about a quarter hour each on
one core). Run only these checks with ``pytest tests/test_acceptance.py``.
"""
import math
import time

import numpy as np
import pytest

from specrecon import tensor as T
from specrecon.cli import infer_array
from specrecon.data import default_response, load_cube, project, save_cube, synthetic_samples
from specrecon.errors import ShapeError
from specrecon.gradsuite import run_suite
from specrecon.metrics import bpmrae, ensemble_average, evaluate, linear_baseline_fit, mrae, rmse
from specrecon.model import (
    WIDTH_SCALES, ArchConfig, hrnet_forward, init_params, load_checkpoint, model_report,
    predict, save_checkpoint,
)
from specrecon.train import FULL_SCALE_CONFIG, TrainConfig, lr_at, train

# desk-scale recipe for criteria 4 and 5
DESK_ARCH = ArchConfig(base_width=16)
DESK_CFG = TrainConfig(epochs=300, batch_size=4, patch_size=32, val_every=10)
DESK_SEEDS = (0, 1, 2)
FIRST_EPOCH_FACTOR = 0.5
RUN_BUDGET_S = 30 * 60


# --- 1 -------------------------------------------------------------------------------

def test_criterion_1_gradient_suite(criterion):
    results, seconds = run_suite(range(5), tolerance=1e-3, step=1e-4)
    worst = max(r.report.max_rel_err for r in results)
    failed = [f"{r.name}/{r.seed}" for r in results if not r.report.passed]
    names = {r.name for r in results}
    ok = not failed and worst < 1e-3 and seconds < 120 and "hrnet_tiny" in names
    criterion(1, ok, f"{len(results)} checks over 5 seeds, max rel err {worst:.2e}, "
                     f"{seconds:.1f}s, failed {failed or 'none'}")
    assert ok


# --- 2 -------------------------------------------------------------------------------

def _sq_norm(a):
    # exactly rounded, so independent of element order
    return math.fsum((a * a).ravel().tolist())


def test_criterion_2_shuffle_round_trip(criterion):
    rng = np.random.default_rng(2)
    bad = 0
    for i in range(100):
        r = (2, 4)[i % 2]
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)) * r * r,
                 int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        x = rng.standard_normal(shape)
        y = T.pixel_shuffle(T.Tensor(x), r).data
        back = T.pixel_unshuffle(T.Tensor(y), r).data
        same = (np.array_equal(back, x)
                and np.array_equal(np.sort(y, axis=None), np.sort(x, axis=None))
                and _sq_norm(y) == _sq_norm(x))
        # the other direction as well
        z = rng.standard_normal((1, 2, 2 * r, 3 * r))
        same &= np.array_equal(T.pixel_shuffle(T.pixel_unshuffle(T.Tensor(z), r), r).data, z)
        bad += not same
    criterion(2, bad == 0, f"100 tensors, r in {{2, 4}}, {bad} mismatches")
    assert bad == 0


# --- 3 -------------------------------------------------------------------------------

def test_criterion_3_forward_contract(criterion):
    rng = np.random.default_rng(3)
    x = rng.random((1, 3, 64, 64)).astype(np.float32)
    shapes = {}
    for s in WIDTH_SCALES:
        params = init_params(ArchConfig(width_scale=s), seed=0, requires_grad=False)
        with T.no_grad():
            shapes[s] = hrnet_forward(T.Tensor(x), params).shape
    params = init_params(ArchConfig(width_scale=0.125), seed=0, requires_grad=False)
    try:
        hrnet_forward(T.Tensor(rng.random((1, 3, 60, 64)).astype(np.float32)), params)
        raises = False
    except ShapeError:
        raises = True
    padded = infer_array(rng.random((3, 60, 60)), params).shape
    ok = (all(v == (1, 31, 64, 64) for v in shapes.values()) and raises
          and padded == (31, 60, 60))
    criterion(3, ok, f"shapes {sorted(set(shapes.values()))}, library error on 60x64: {raises}, "
                     f"pad-and-crop 60x60 -> {padded}")
    assert ok


# --- 4 and 5 ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_runs():
    train_set = synthetic_samples(64, (64, 64), seed=0)
    val_set = synthetic_samples(8, (64, 64), seed=1)
    runs = {}
    for seed in DESK_SEEDS:
        t0 = time.perf_counter()
        cfg = TrainConfig(**{**DESK_CFG.__dict__, "seed": seed})
        params, log = train(cfg, DESK_ARCH, train_set, val_set)
        runs[seed] = (params, log, time.perf_counter() - t0)
    return train_set, val_set, runs


def test_criterion_4_desk_training(criterion, desk_runs):
    train_set, val_set, runs = desk_runs
    _, log, seconds = runs[DESK_SEEDS[0]]
    resp = default_response()
    fit = linear_baseline_fit([s.rgb for s in train_set], [s.cube for s in train_set])
    baseline = evaluate([fit.predict(s.rgb) for s in val_set], [s.cube for s in val_set], resp)
    first, final = log.records[0].mrae, log.records[-1].mrae
    ok = (final <= FIRST_EPOCH_FACTOR * first and final <= baseline.mrae
          and seconds <= RUN_BUDGET_S)
    criterion(4, ok, f"val MRAE epoch 1 {first:.4f} -> epoch {log.records[-1].epoch} "
                     f"{final:.4f} (bar {FIRST_EPOCH_FACTOR * first:.4f}), linear map "
                     f"{baseline.mrae:.4f}, {seconds / 60:.1f} min")
    assert ok


def test_criterion_5_ensemble(criterion, desk_runs):
    _, val_set, runs = desk_runs
    gts = [s.cube for s in val_set]
    member_preds = [[predict(s.rgb, log.best_params) for s in val_set]
                    for _, log, _ in runs.values()]
    member_mrae = [np.mean([mrae(p, g) for p, g in zip(preds, gts)]) for preds in member_preds]
    fused = [ensemble_average([m[i] for m in member_preds]) for i in range(len(gts))]
    ens = np.mean([mrae(p, g) for p, g in zip(fused, gts)])
    ok = ens <= np.mean(member_mrae)
    criterion(5, ok, f"ensemble MRAE {ens:.5f} vs best member {min(member_mrae):.5f}, "
                     f"member mean {np.mean(member_mrae):.5f}")
    assert ok


# --- 6 -------------------------------------------------------------------------------

def _loop_mrae(p, g, eps=1e-8):
    return sum(abs(a - b) / max(b, eps) for a, b in zip(p.ravel().tolist(), g.ravel().tolist())) / p.size


def _loop_rmse(p, g):
    return (sum((a - b) ** 2 for a, b in zip(p.ravel().tolist(), g.ravel().tolist())) / p.size) ** 0.5


def _loop_render(cube, resp):
    B, H, W = cube.shape
    out = np.zeros((3, H, W))
    for c in range(3):
        for y in range(H):
            for x in range(W):
                acc = 0.0
                for k in range(B):
                    acc += cube[k, y, x] * resp[k, c]
                out[c, y, x] = acc
    return out


def test_criterion_6_metric_oracles(criterion):
    rng = np.random.default_rng(6)
    resp = default_response()
    worst = 0.0
    composed = True
    for _ in range(50):
        gt = rng.random((31, 6, 7))
        pred = np.clip(gt + rng.normal(0, 0.05, gt.shape), 0, None)
        worst = max(worst,
                    abs(mrae(pred, gt) - _loop_mrae(pred, gt)),
                    abs(rmse(pred, gt) - _loop_rmse(pred, gt)),
                    abs(bpmrae(pred, gt, resp)
                        - _loop_mrae(_loop_render(pred, resp), _loop_render(gt, resp))))
        composed &= bpmrae(pred, gt, resp) == mrae(project(pred, resp), project(gt, resp))
    ok = worst <= 1e-12 and composed
    criterion(6, ok, f"50 pairs, max |impl - loop| {worst:.1e}, bpmrae == mrae o render: {composed}")
    assert ok


# --- 7 -------------------------------------------------------------------------------

def test_criterion_7_lr_schedule(criterion):
    got = [lr_at(e, FULL_SCALE_CONFIG) for e in (0, 3000, 6000)]
    ok = got == [1e-4, 5e-5, 2.5e-5]
    criterion(7, ok, f"lr at epochs 0/3000/6000 = {got}")
    assert ok


# --- 8 -------------------------------------------------------------------------------

def test_criterion_8_compression_trend(criterion):
    reps = [model_report(ArchConfig(width_scale=s)) for s in WIDTH_SCALES]
    ratios = [a.params / b.params for a, b in zip(reps, reps[1:])]
    monotone = all(a.macs > b.macs and a.params > b.params and a.weights_bytes > b.weights_bytes
                   for a, b in zip(reps, reps[1:]))
    ok = monotone and all(3.2 <= r <= 4.3 for r in ratios)
    criterion(8, ok, f"params ratios {[round(r, 3) for r in ratios]}, monotone {monotone}")
    assert ok


# --- 9 -------------------------------------------------------------------------------

def test_criterion_9_format_round_trips(criterion, tmp_path):
    rng = np.random.default_rng(9)
    cube = rng.random((31, 482, 512)).astype(np.float32)
    save_cube(tmp_path / "native.hsc", cube)
    cube_ok = load_cube(tmp_path / "native.hsc").tobytes() == cube.tobytes()
    size_ok = (tmp_path / "native.hsc").stat().st_size == 16 + 4 * 482 * 512 * 31

    params = init_params(ArchConfig(width_scale=0.25), seed=9)
    save_checkpoint(tmp_path / "a.hrck", params)
    back = load_checkpoint(tmp_path / "a.hrck")
    save_checkpoint(tmp_path / "b.hrck", back)
    ckpt_ok = (list(back.tensors) == list(params.tensors)
               and all(back[k].data.tobytes() == params[k].data.tobytes() for k in params.tensors)
               and back.arch == params.arch and back.seed == params.seed
               and (tmp_path / "a.hrck").read_bytes() == (tmp_path / "b.hrck").read_bytes())
    ok = cube_ok and size_ok and ckpt_ok
    criterion(9, ok, f"HSC1 482x512x31 bit-exact {cube_ok and size_ok}, HRCK bit-exact {ckpt_ok}")
    assert ok
