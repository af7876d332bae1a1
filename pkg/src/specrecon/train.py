"""L1 training loop: Adam, step-halving learning rate, random aligned patches."""
from __future__ import annotations

import configparser
import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import default_response, load_dataset, sample_patch
from .errors import ConfigError, ShapeError, TrainingError
from .metrics import evaluate
from .model import ArchConfig, ModelParams, hrnet_forward, init_params, predict, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    base_lr: float = 1e-4
    lr_half_every: int = 100
    batch_size: int = 4
    patch_size: int = 32
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0          # 0: only keep the best-so-far checkpoint
    val_every: int = 1
    track: str = "clean"
    train_dir: str | None = None
    val_dir: str | None = None
    out_dir: str | None = None

    def validate(self):
        for name in ("base_lr", "lr_half_every", "batch_size", "patch_size", "val_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.checkpoint_every < 0:
            raise ConfigError("epochs and checkpoint_every must be >= 0")
        if self.patch_size % 8:
            raise ConfigError(f"patch_size {self.patch_size} is not a multiple of 8")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("Adam betas must lie in [0, 1) and eps must be positive")
        if self.track not in ("clean", "real"):
            raise ConfigError(f"track must be 'clean' or 'real', got {self.track!r}")
        return self


# full-scale recipe; the dataclass defaults are a desk-scale shrink of it
FULL_SCALE_CONFIG = TrainConfig(epochs=10000, base_lr=1e-4, lr_half_every=3000, batch_size=8,
                           patch_size=256)


def lr_at(epoch, cfg: TrainConfig):
    """Learning rate after ``epoch`` completed epochs."""
    return cfg.base_lr * 2.0 ** -(epoch // cfg.lr_half_every)


def l1_loss(pred: T.Tensor, gt: T.Tensor) -> T.Tensor:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and target {gt.shape} differ")
    return T.mean(T.absolute(T.sub(pred, gt)))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float,
              betas=(0.5, 0.999), eps=1e-8):
    """One bias-corrected Adam update. Missing gradients count as zero."""
    b1, b2 = betas
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - step).astype(p.data.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------------------
# Logs
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    mrae: float | None = None
    rmse: float | None = None
    bpmrae: float | None = None
    path: str | None = None


_LOG_FIELDS = ("epoch", "loss", "lr", "mrae", "rmse", "bpmrae", "path")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    # snapshot of the parameters at the best validation epoch
    best_params: ModelParams | None = None

    def __len__(self):
        return len(self.records)

    def append(self, rec: EpochRecord):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ConfigError("log epochs must increase")
        self.records.append(rec)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(_LOG_FIELDS)
            for r in self.records:
                w.writerow(["" if getattr(r, k) is None else
                            (repr(getattr(r, k)) if isinstance(getattr(r, k), float)
                             else getattr(r, k)) for k in _LOG_FIELDS])

    @classmethod
    def from_csv(cls, path):
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                kw = {k: (None if row[k] == "" else row[k]) for k in _LOG_FIELDS}
                out.append(EpochRecord(
                    epoch=int(kw["epoch"]), loss=float(kw["loss"]), lr=float(kw["lr"]),
                    **{k: None if kw[k] is None else float(kw[k])
                       for k in ("mrae", "rmse", "bpmrae")},
                    path=kw["path"]))
        return out


def select_best_epoch(log: TrainLog):
    """(epoch, checkpoint path) with the lowest validation MRAE; ties go to the later epoch."""
    best = None
    for r in log.records:
        if r.mrae is None:
            continue
        if best is None or r.mrae <= best.mrae:
            best = r
    if best is None:
        raise ConfigError("log has no validated epochs")
    return best.epoch, best.path


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

def _batches(order, size):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def validate_model(params, samples, resp):
    preds = [predict(s.rgb, params) for s in samples]
    return evaluate(preds, [s.cube for s in samples], resp, names=[s.name for s in samples])


def train(cfg: TrainConfig, arch: ArchConfig, train_samples=None, val_samples=None,
          resp=None, params: ModelParams | None = None):
    """Run the full loop; returns ``(final params, TrainLog)``.

    Samples default to the datasets under ``cfg.train_dir`` / ``cfg.val_dir``.
    Epoch ``e`` (1-based in the log) uses ``lr_at(e - 1)``. Validation runs on
    epoch 1, the last epoch and every ``val_every`` epochs.
    """
    cfg.validate()
    arch.validate()
    if train_samples is None:
        if cfg.train_dir is None:
            raise ConfigError("no training data: pass samples or set train_dir")
        train_samples = load_dataset(cfg.train_dir, cfg.track)
    if val_samples is None and cfg.val_dir is not None:
        val_samples = load_dataset(cfg.val_dir, cfg.track)
    resp = default_response() if resp is None else resp
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(arch, seed=cfg.seed)
    state = AdamState()
    tlog = TrainLog()
    best_mrae = math.inf
    scratch_ckpt = None

    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(epoch - 1, cfg)
        order = rng.permutation(len(train_samples))
        total, seen = 0.0, 0
        for idx in _batches(order, cfg.batch_size):
            pairs = [sample_patch(train_samples[i].rgb, train_samples[i].cube, cfg.patch_size, rng)
                     for i in idx]
            x = T.Tensor(np.stack([p[0] for p in pairs]).astype(np.float32))
            y = T.Tensor(np.stack([p[1] for p in pairs]).astype(np.float32))
            loss = l1_loss(hrnet_forward(x, params), y)
            value = float(loss.data.reshape(()))
            if not math.isfinite(value):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            params.zero_grad()
            T.backward(loss)
            adam_step(params, {k: t.grad for k, t in params.items()}, state, lr,
                      (cfg.beta1, cfg.beta2), cfg.adam_eps)
            total += value * len(idx)
            seen += len(idx)
        rec = EpochRecord(epoch=epoch, loss=total / seen, lr=lr)

        if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            rec.path = str(out_dir / f"epoch_{epoch:05d}.hrck")
            save_checkpoint(rec.path, params)

        if val_samples and (epoch == 1 or epoch == cfg.epochs or epoch % cfg.val_every == 0):
            rep = validate_model(params, val_samples, resp)
            rec.mrae, rec.rmse, rec.bpmrae = rep.mrae, rep.rmse, rep.bpmrae
            if rep.mrae <= best_mrae:
                best_mrae = rep.mrae
                tlog.best_params = params.copy()
                if out_dir is not None and rec.path is None:
                    rec.path = str(out_dir / f"epoch_{epoch:05d}.hrck")
                    save_checkpoint(rec.path, params)
                    if scratch_ckpt is not None:
                        Path(scratch_ckpt).unlink(missing_ok=True)
                        for r in tlog.records:
                            if r.path == scratch_ckpt:
                                r.path = None
                    scratch_ckpt = rec.path
        tlog.append(rec)
        log.info("epoch %d loss %.5f lr %.3g mrae %s", epoch, rec.loss, lr,
                 "-" if rec.mrae is None else f"{rec.mrae:.5f}")

    if out_dir is not None:
        tlog.to_csv(out_dir / "log.csv")
        save_checkpoint(out_dir / "final.hrck", params)
    return params, tlog


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

def _coerce(value, template):
    if template is None or isinstance(template, str):
        return None if value.lower() in ("", "none") else value
    if isinstance(template, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    raise ConfigError(f"cannot parse {value!r}")


def load_config(path, train_cfg: TrainConfig = TrainConfig(), arch: ArchConfig = ArchConfig()):
    """Read ``[train]`` and ``[arch]`` sections of an INI file over the given defaults."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read config {path}")
    unknown = set(cp.sections()) - {"train", "arch"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    updates = {}
    for section, obj in (("train", train_cfg), ("arch", arch)):
        if not cp.has_section(section):
            updates[section] = {}
            continue
        known = {f.name: getattr(obj, f.name) for f in fields(obj)}
        kv = {}
        for key, raw in cp.items(section):
            if key not in known:
                raise ConfigError(f"unknown key [{section}] {key}")
            if key == "blocks_per_level":
                kv[key] = tuple(tuple(int(v) for v in pair.split("x"))
                                for pair in raw.replace(" ", "").split(","))
            elif key == "growth_rate":
                kv[key] = None if raw.lower() in ("", "none", "auto") else int(raw)
            else:
                kv[key] = _coerce(raw, known[key])
        updates[section] = kv
    return replace(train_cfg, **updates["train"]), replace(arch, **updates["arch"])
