"""Four-level multi-resolution residual network (RGB -> 31 bands).

Level 0 runs at full resolution; level l sees the RGB input pixel-unshuffled
by 2**l, so no pixels are discarded on the way down. Levels are evaluated
bottom-up: each finished level is pixel-shuffled by 2, concatenated onto the
level above and fused with a 3x3 conv before that level's block stack.

Parameter names follow ``level{l}.{part}.{leaf}``, e.g.
``level2.resdb0.conv3.weight``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .tensor import Tensor

LEVELS = 4
WIDTH_SCALES = (1.0, 0.5, 0.25, 0.125)
# MACs are counted at a 482 x 512 benchmark resolution, padded to a multiple of 8
REPORT_SIZE = (482, 512)

CKPT_MAGIC = b"HRCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    base_width: int = 64
    width_scale: float = 1.0
    levels: int = LEVELS
    # (num_resdb, num_resgb) per level, top (full resolution) first
    blocks_per_level: tuple = ((2, 2), (1, 1), (1, 1), (1, 1))
    growth_rate: int | None = None
    attention_reduction: int = 16
    leaky_slope: float = 0.2
    in_channels: int = 3
    out_channels: int = 31
    # "db_gb" runs ResDB before ResGB inside each pair; "gb_db" swaps them
    block_order: str = "db_gb"

    def __post_init__(self):
        object.__setattr__(self, "blocks_per_level",
                           tuple(tuple(int(v) for v in b) for b in self.blocks_per_level))
        object.__setattr__(self, "width_scale", float(self.width_scale))

    def widths(self):
        return [int(round(self.base_width * 2 ** lvl * self.width_scale))
                for lvl in range(self.levels)]

    def growth(self, width):
        if self.growth_rate is not None:
            return self.growth_rate
        return max(width // 2, 4)

    def squeeze(self, width):
        return max(width // self.attention_reduction, 1)

    def validate(self):
        if self.levels != LEVELS:
            raise ConfigError(f"levels is fixed at {LEVELS}, got {self.levels}")
        if self.width_scale not in WIDTH_SCALES:
            raise ConfigError(f"width_scale must be one of {WIDTH_SCALES}, got {self.width_scale}")
        if self.base_width < 1:
            raise ConfigError("base_width must be positive")
        widths = self.widths()
        if min(widths) < 4:
            raise ConfigError(f"level widths {widths} fall below 4 channels")
        for lvl, w in enumerate(widths[1:], start=1):
            if w % 4:
                raise ConfigError(f"level {lvl} width {w} is not divisible by 4 "
                                  "(needed for the 2x pixel shuffle)")
        if len(self.blocks_per_level) != self.levels:
            raise ConfigError("blocks_per_level needs one entry per level")
        totals = [sum(b) for b in self.blocks_per_level]
        if any(v < 0 for b in self.blocks_per_level for v in b):
            raise ConfigError("block counts must be non-negative")
        if any(a < b for a, b in zip(totals, totals[1:])):
            raise ConfigError(f"block counts {totals} must not increase towards the bottom level")
        if self.growth_rate is not None and self.growth_rate < 1:
            raise ConfigError("growth_rate must be positive")
        if self.attention_reduction < 1:
            raise ConfigError("attention_reduction must be positive")
        if self.block_order not in ("db_gb", "gb_db"):
            raise ConfigError(f"unknown block_order {self.block_order!r}")
        if self.in_channels != 3 or self.out_channels < 1:
            raise ConfigError("network maps 3 input channels to out_channels bands")
        return self

    def to_dict(self):
        d = asdict(self)
        d["blocks_per_level"] = [list(b) for b in self.blocks_per_level]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "blocks_per_level" in d:
            d["blocks_per_level"] = tuple(tuple(b) for b in d["blocks_per_level"])
        return cls(**d)


def tiny_arch(**overrides):
    """Smallest sensible configuration; used for gradient checks."""
    kw = dict(base_width=8, blocks_per_level=((1, 1),) * 4, attention_reduction=4)
    kw.update(overrides)
    return ArchConfig(**kw)


def _block_sequence(arch, lvl):
    n_db, n_gb = arch.blocks_per_level[lvl]
    seq = []
    for i in range(max(n_db, n_gb)):
        pair = [("resdb", i)] if i < n_db else []
        if i < n_gb:
            pair.append(("resgb", i))
        if arch.block_order == "gb_db":
            pair.reverse()
        seq.extend(pair)
    return seq


def _conv_shapes(prefix, cin, cout, k):
    return {f"{prefix}.weight": (cout, cin, k, k), f"{prefix}.bias": (cout,)}


def param_shapes(arch: ArchConfig) -> dict:
    """Ordered mapping parameter path -> shape, fully determined by ``arch``."""
    arch.validate()
    widths = arch.widths()
    shapes = {}
    for lvl in range(arch.levels):
        w = widths[lvl]
        p = f"level{lvl}"
        shapes.update(_conv_shapes(f"{p}.head", arch.in_channels * 4 ** lvl, w, 3))
        if lvl < arch.levels - 1:
            shapes.update(_conv_shapes(f"{p}.fuse", w + widths[lvl + 1] // 4, w, 3))
        g = arch.growth(w)
        for kind, i in _block_sequence(arch, lvl):
            if kind == "resdb":
                for j in range(4):
                    shapes.update(_conv_shapes(f"{p}.resdb{i}.conv{j + 1}", w + j * g, g, 3))
                shapes.update(_conv_shapes(f"{p}.resdb{i}.conv5", w + 4 * g, w, 3))
            else:
                s = arch.squeeze(w)
                shapes.update(_conv_shapes(f"{p}.resgb{i}.conv1", w, w, 3))
                shapes.update(_conv_shapes(f"{p}.resgb{i}.conv2", w, w, 3))
                shapes[f"{p}.resgb{i}.fc1.weight"] = (s, w)
                shapes[f"{p}.resgb{i}.fc1.bias"] = (s,)
                shapes[f"{p}.resgb{i}.fc2.weight"] = (w, s)
                shapes[f"{p}.resgb{i}.fc2.bias"] = (w,)
        if lvl == arch.levels - 1:
            shapes.update(_conv_shapes(f"{p}.tone", w, w, 1))
    shapes.update(_conv_shapes("out", widths[0], arch.out_channels, 3))
    return shapes


@dataclass
class ModelParams:
    tensors: dict
    arch: ArchConfig
    seed: int | None = None

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def count(self):
        return sum(t.data.size for t in self.tensors.values())

    def astype(self, dtype, requires_grad=None):
        rg = requires_grad
        return ModelParams(
            {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad if rg is None else rg)
             for k, v in self.tensors.items()},
            self.arch, self.seed)

    def copy(self):
        return self.astype(next(iter(self.tensors.values())).dtype)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def check(self):
        expected = param_shapes(self.arch)
        if set(expected) != set(self.tensors):
            missing = set(expected) ^ set(self.tensors)
            raise ConfigError(f"parameters do not match arch: {sorted(missing)[:5]}")
        for k, shp in expected.items():
            if self.tensors[k].shape != shp:
                raise ConfigError(f"{k}: shape {self.tensors[k].shape} != {shp}")


def _fans(shape):
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    return shape[1], shape[0]


def xavier_uniform(shape, rng):
    fan_in, fan_out = _fans(shape)
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(arch: ArchConfig, seed: int = 0, dtype=np.float32,
                requires_grad: bool = True) -> ModelParams:
    """Uniform Xavier weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = xavier_uniform(shape, rng)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=requires_grad)
    return ModelParams(tensors, arch, seed)


def zero_params(arch: ArchConfig, dtype=np.float64) -> ModelParams:
    return ModelParams({k: Tensor(np.zeros(s, dtype=dtype))
                        for k, s in param_shapes(arch).items()}, arch, None)


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

def _conv(x, params, prefix, act="leaky_relu", slope=0.2):
    y = T.conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])
    return T.activation(y, act, slope)


def res_dense_block(x: Tensor, params, prefix: str, slope: float = 0.2) -> Tensor:
    """Five densely connected 3x3 convs with an identity shortcut."""
    width = params[f"{prefix}.conv5.weight"].shape[0]
    if x.shape[1] != width:
        raise ShapeError(f"{prefix}: input has {x.shape[1]} channels, block width is {width}")
    feats = x
    for j in range(1, 5):
        y = _conv(feats, params, f"{prefix}.conv{j}", slope=slope)
        feats = T.concat([feats, y])
    return T.add(x, _conv(feats, params, f"{prefix}.conv5", act="identity"))


def res_global_block(x: Tensor, params, prefix: str, slope: float = 0.2) -> Tensor:
    """Conv trunk rescaled per channel by pooled-feature attention, plus shortcut."""
    width = params[f"{prefix}.conv1.weight"].shape[0]
    if x.shape[1] != width:
        raise ShapeError(f"{prefix}: input has {x.shape[1]} channels, block width is {width}")
    trunk = _conv(x, params, f"{prefix}.conv1", slope=slope)
    trunk = _conv(trunk, params, f"{prefix}.conv2", slope=slope)
    a = T.global_avg_pool(trunk)
    a = T.leaky_relu(T.linear(a, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]), slope)
    a = T.sigmoid(T.linear(a, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"]))
    return T.add(x, T.mul(trunk, a))


def hrnet_forward(rgb: Tensor, params: ModelParams) -> Tensor:
    """N x 3 x H x W -> N x 31 x H x W, H and W divisible by 8."""
    arch = params.arch
    if rgb.ndim != 4 or rgb.shape[1] != arch.in_channels:
        raise ShapeError(f"expected N x {arch.in_channels} x H x W input, got {rgb.shape}")
    f = 2 ** (arch.levels - 1)
    if rgb.shape[2] % f or rgb.shape[3] % f:
        raise ShapeError(f"input {rgb.shape[2]}x{rgb.shape[3]} not divisible by {f}")
    params.check()
    slope = arch.leaky_slope

    below = None
    for lvl in reversed(range(arch.levels)):
        p = f"level{lvl}"
        x = rgb if lvl == 0 else T.pixel_unshuffle(rgb, 2 ** lvl)
        feats = _conv(x, params, f"{p}.head", slope=slope)
        if below is not None:
            feats = T.concat([feats, T.pixel_shuffle(below, 2)])
            feats = _conv(feats, params, f"{p}.fuse", slope=slope)
        for kind, i in _block_sequence(arch, lvl):
            block = res_dense_block if kind == "resdb" else res_global_block
            feats = block(feats, params, f"{p}.{kind}{i}", slope)
        if lvl == arch.levels - 1:
            feats = _conv(feats, params, f"{p}.tone", slope=slope)
        below = feats
    return _conv(below, params, "out", act="identity")


def predict(rgb: np.ndarray, params: ModelParams, clamp: bool = True) -> np.ndarray:
    """Inference on an (N,)3,H,W array without building a graph."""
    arr = np.asarray(rgb)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    dtype = next(iter(params.tensors.values())).dtype
    with T.no_grad():
        out = hrnet_forward(Tensor(arr.astype(dtype, copy=False)), params).data
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelReport:
    macs: int
    params: int
    weights_bytes: int

    def as_row(self):
        return {"macs_g": self.macs / 1e9, "params_m": self.params / 1e6,
                "weights_mb": self.weights_bytes / 2 ** 20}


def _level_of(name):
    return int(name[5]) if name.startswith("level") else 0


def model_report(arch: ArchConfig, size=REPORT_SIZE) -> ModelReport:
    """Analytic MACs for one forward at ``size`` (padded up to a multiple of 8)."""
    shapes = param_shapes(arch)
    f = 2 ** (arch.levels - 1)
    H = -(-size[0] // f) * f
    W = -(-size[1] // f) * f
    macs = 0
    n_params = 0
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        n_params += n
        if not name.endswith(".weight"):
            continue
        if len(shape) == 4:
            lvl = _level_of(name)
            macs += n * (H >> lvl) * (W >> lvl)
        else:
            macs += n
    return ModelReport(macs=macs, params=n_params,
                       weights_bytes=_header_size(arch, shapes) + 4 * n_params)


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------

def _arch_bytes(arch):
    return json.dumps(arch.to_dict(), sort_keys=True).encode("utf-8")


def _header_size(arch, shapes):
    size = 4 + 4 + 4 + len(_arch_bytes(arch)) + 8 + 4
    for name in shapes:
        size += 4 + len(name.encode("utf-8")) + 16
    return size


def _shape4(shape):
    if len(shape) > 4:
        raise ShapeError(f"cannot store {len(shape)}-D tensor")
    return tuple(shape) + (0,) * (4 - len(shape))


def save_checkpoint(path, params: ModelParams):
    """Write ``params`` in the HRCK layout (see docs/FORMATS.md)."""
    buf = io.BytesIO()
    arch = _arch_bytes(params.arch)
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(arch)))
    buf.write(arch)
    buf.write(struct.pack("<qI", -1 if params.seed is None else params.seed, len(params)))
    for name, t in params.items():
        key = name.encode("utf-8")
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<4I", *_shape4(t.shape)))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            missing = self.pos + n - len(self.raw)
            raise FormatError(f"truncated while reading {what}: {missing} more bytes needed",
                              self.path, self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path, requires_grad: bool = False) -> ModelParams:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad magic, expected b'HRCK'", path, 0)
    version, arch_len = r.unpack("<II", "header")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path, 4)
    try:
        arch = ArchConfig.from_dict(json.loads(r.take(arch_len, "arch").decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable arch record: {exc}", path, 12) from exc
    seed, count = r.unpack("<qI", "seed/count")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<I", "path length")
        name = r.take(n, "path").decode("utf-8")
        shape = tuple(d for d in r.unpack("<4I", f"{name} shape") if d)
        size = int(np.prod(shape))
        data = np.frombuffer(r.take(4 * size, f"{name} values"), dtype="<f4").reshape(shape)
        tensors[name] = Tensor(data.astype(np.float32), requires_grad=requires_grad)
    if r.pos != len(r.raw):
        raise FormatError(f"{len(r.raw) - r.pos} trailing bytes", path, r.pos)
    params = ModelParams(tensors, arch, None if seed < 0 else seed)
    try:
        params.check()
    except ConfigError as exc:
        raise FormatError(str(exc), path) from exc
    return params
