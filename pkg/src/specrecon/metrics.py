"""Reconstruction metrics, ensemble fusion and the per-pixel linear baseline."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import check_response, project
from .errors import ConfigError, ShapeError

EPS = 1e-8


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt


def mrae(pred, gt, eps=EPS):
    """Mean of ``|pred - gt| / max(gt, eps)`` over every value."""
    if eps <= 0:
        raise ConfigError("eps must be positive")
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.abs(pred - gt) / np.maximum(gt, eps)))


def rmse(pred, gt):
    pred, gt = _pair(pred, gt)
    return float(np.sqrt(np.mean((pred - gt) ** 2)))


def bpmrae(pred, gt, resp, eps=EPS):
    """MRAE between the (unclamped) RGB projections of two cubes."""
    pred, gt = _pair(pred, gt)
    resp = check_response(resp)
    return mrae(project(pred, resp), project(gt, resp), eps)


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------

@dataclass
class EnsembleSet:
    members: list
    labels: list = field(default_factory=list)

    def __post_init__(self):
        if not self.labels:
            self.labels = [f"member{i}" for i in range(len(self.members))]


def ensemble_average(members):
    """Unweighted per-value mean of same-shaped predictions."""
    if isinstance(members, EnsembleSet):
        members = members.members
    if len(members) == 0:
        raise ConfigError("ensemble needs at least one member")
    arrs = [np.asarray(m) for m in members]
    for a in arrs[1:]:
        if a.shape != arrs[0].shape:
            raise ShapeError(f"ensemble member shape {a.shape} != {arrs[0].shape}")
    out = arrs[0].astype(np.float64)
    for a in arrs[1:]:
        out = out + a
    return out / len(arrs)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    mrae: float
    rmse: float
    bpmrae: float
    per_image: list

    def rows(self):
        yield from self.per_image
        yield {"name": "mean", "mrae": self.mrae, "rmse": self.rmse, "bpmrae": self.bpmrae}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["name", "mrae", "rmse", "bpmrae"])
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v)
                            for k, v in row.items()})

    def table(self):
        lines = [f"{'image':<16}{'MRAE':>12}{'RMSE':>12}{'BPMRAE':>12}"]
        for row in self.rows():
            lines.append(f"{row['name']:<16}{row['mrae']:>12.6f}{row['rmse']:>12.6f}"
                         f"{row['bpmrae']:>12.6f}")
        return "\n".join(lines)


def evaluate(predictions, gts, resp, eps=EPS, names=None, clamp=True):
    """Per-image and mean MRAE/RMSE/BPMRAE; predictions are clamped to [0, 1]."""
    predictions = list(predictions)
    gts = list(gts)
    if len(predictions) != len(gts):
        raise ShapeError(f"{len(predictions)} predictions for {len(gts)} ground truths")
    if not gts:
        raise ConfigError("nothing to evaluate")
    names = names or [f"image{i}" for i in range(len(gts))]
    per_image = []
    for name, p, g in zip(names, predictions, gts):
        p = np.clip(p, 0.0, 1.0) if clamp else p
        per_image.append({"name": name, "mrae": mrae(p, g, eps), "rmse": rmse(p, g),
                          "bpmrae": bpmrae(p, g, resp, eps)})
    agg = {k: float(np.mean([r[k] for r in per_image])) for k in ("mrae", "rmse", "bpmrae")}
    return MetricReport(per_image=per_image, **agg)


# ---------------------------------------------------------------------------
# Per-pixel affine baseline
# ---------------------------------------------------------------------------

@dataclass
class LinearBaseline:
    """``cube[:, y, x] = weight @ rgb[:, y, x] + bias``; weight is 31 x 3."""

    weight: np.ndarray
    bias: np.ndarray

    def predict(self, rgb):
        rgb = np.asarray(rgb, dtype=np.float64)
        return np.tensordot(self.weight, rgb, axes=([1], [0])) + self.bias[:, None, None]


def _design(rgbs, cubes):
    X = np.concatenate([np.asarray(r, dtype=np.float64).reshape(3, -1).T for r in rgbs])
    Y = np.concatenate([np.asarray(c, dtype=np.float64).reshape(c.shape[0], -1).T
                        for c in cubes])
    return np.hstack([X, np.ones((X.shape[0], 1))]), Y


def linear_baseline_fit(rgbs, cubes, ridge=0.0):
    """Least squares RGB -> spectrum affine map via the normal equations."""
    X, Y = _design(rgbs, cubes)
    if X.shape[0] < 32:
        raise ConfigError(f"need at least 32 training pixels, got {X.shape[0]}")
    G = X.T @ X
    if ridge == 0.0 and np.linalg.matrix_rank(G) < G.shape[0]:
        raise ConfigError("design matrix is rank deficient; "
                          "refit with a small ridge such as ridge=1e-6")
    G = G + ridge * np.eye(G.shape[0])
    coef = np.linalg.solve(G, X.T @ Y)                       # 4 x B
    return LinearBaseline(weight=coef[:3].T.copy(), bias=coef[3].copy())


def write_summary_csv(path, rows, fields=("label", "mrae", "rmse", "bpmrae")):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
