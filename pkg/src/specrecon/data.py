"""Spectral cubes, RGB rendering, degradation, synthetic scenes and file I/O.

Arrays are channel-first throughout: a cube is ``(31, H, W)`` (band-major),
an RGB image is ``(3, H, W)`` and a response function is ``(31, 3)``.
"""
from __future__ import annotations

import functools
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import png
from scipy import ndimage

from .errors import ConfigError, FormatError, ShapeError

BANDS = 31
WAVELENGTHS = 400.0 + 10.0 * np.arange(BANDS)

CUBE_MAGIC = b"HSC1"
_HEADER = struct.Struct("<4sIII")


def check_cube(cube, name="cube"):
    cube = np.asarray(cube)
    if cube.ndim != 3 or cube.shape[0] != BANDS:
        raise ShapeError(f"{name} must be ({BANDS}, H, W), got {cube.shape}")
    return cube


def check_response(resp):
    resp = np.asarray(resp, dtype=np.float64)
    if resp.shape != (BANDS, 3):
        raise ShapeError(f"response must be ({BANDS}, 3), got {resp.shape}")
    if not np.all(np.isfinite(resp)):
        raise ConfigError("response contains non-finite entries")
    return resp


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def default_response(centers=(610.0, 540.0, 470.0), widths=(40.0, 35.0, 30.0)):
    """Gaussian R, G, B sensitivities sampled at the band centres, L1-normalised per column."""
    curves = np.stack([np.exp(-0.5 * ((WAVELENGTHS - c) / w) ** 2)
                       for c, w in zip(centers, widths)], axis=1)
    return curves / curves.sum(axis=0, keepdims=True)


def project(cube, resp):
    """Linear projection onto RGB without clamping; accepts (..., 31, H, W)."""
    cube = np.asarray(cube)
    resp = np.asarray(resp)
    return np.moveaxis(np.tensordot(cube, resp, axes=([-3], [0])), -1, -3)


def render_rgb(cube, resp):
    """``RGB_c = sum_k cube_k * resp[k, c]``, clamped to [0, 1]."""
    return np.clip(project(check_cube(cube), check_response(resp)), 0.0, 1.0)


@dataclass(frozen=True)
class DegradeConfig:
    noise_sigma: float = 0.01
    mosaic: bool = True
    quantize_bits: int | None = 8

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.quantize_bits is not None and not 8 <= self.quantize_bits <= 16:
            raise ConfigError("quantize_bits must lie in 8..16")


IDENTITY_DEGRADE = DegradeConfig(noise_sigma=0.0, mosaic=False, quantize_bits=None)

# RGGB: R at (even, even), G at (even, odd) and (odd, even), B at (odd, odd)
_K_G = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64) / 4
_K_RB = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 4


def bayer_masks(H, W):
    yy, xx = np.mgrid[0:H, 0:W]
    r = (yy % 2 == 0) & (xx % 2 == 0)
    b = (yy % 2 == 1) & (xx % 2 == 1)
    return np.stack([r, ~(r | b), b]).astype(np.float64)


def mosaic_demosaic(rgb):
    """Subsample to an RGGB mosaic and reconstruct by bilinear interpolation.

    Interpolation is normalised by the sampled weight under the kernel, so
    borders need no padding convention and a constant field is reproduced.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    masks = bayer_masks(*rgb.shape[1:])
    out = np.empty_like(rgb)
    for c, k in enumerate((_K_RB, _K_G, _K_RB)):
        num = ndimage.correlate(rgb[c] * masks[c], k, mode="constant")
        den = ndimage.correlate(masks[c], k, mode="constant")
        out[c] = np.where(masks[c] > 0, rgb[c], num / den)
    return out


def degrade_real_world(rgb, cfg: DegradeConfig = DegradeConfig(), seed=0):
    """Track-2 style corruption: optional mosaic, Gaussian noise, quantisation, clamp."""
    out = np.asarray(rgb, dtype=np.float64)
    if cfg.mosaic:
        out = mosaic_demosaic(out)
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        out = out + rng.normal(0.0, cfg.noise_sigma, size=out.shape)
    if cfg.quantize_bits is not None:
        levels = 2 ** cfg.quantize_bits - 1
        out = np.round(np.clip(out, 0.0, 1.0) * levels) / levels
    return np.clip(out, 0.0, 1.0).astype(np.asarray(rgb).dtype, copy=False)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

def random_spectrum(rng):
    """Positive spectrum: 2-4 Gaussian bumps on a non-negative linear ramp."""
    lam = WAVELENGTHS
    lo, hi = rng.uniform(0.02, 0.3, size=2)
    s = lo + (hi - lo) * (lam - lam[0]) / (lam[-1] - lam[0])
    for _ in range(rng.integers(2, 5)):
        center = rng.uniform(380.0, 720.0)
        width = rng.uniform(20.0, 80.0)
        s = s + rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((lam - center) / width) ** 2)
    return s


# Scenes draw their region spectra from one fixed library of materials, the way
# natural scenes reuse a limited set of reflectances. ``materials=0`` gives
# every region an independent random spectrum instead.
MATERIALS = 24
_LIBRARY_SEED = 7919


@functools.lru_cache(maxsize=8)
def material_library(count=MATERIALS):
    """``(count, 31)`` prototype spectra, identical on every call."""
    lib = np.stack([random_spectrum(np.random.default_rng([_LIBRARY_SEED, i]))
                    for i in range(count)])
    lib.setflags(write=False)
    return lib


def gen_synthetic_scene(seed, size=(64, 64), dtype=np.float32, materials=MATERIALS):
    """Voronoi regions of random spectra under smooth shading, scaled into [0, 1].

    ``seed`` is anything ``numpy.random.default_rng`` accepts. Each region takes
    a library material with a small random linear tilt across wavelength.
    """
    H, W = size
    if H < 16 or W < 16:
        raise ShapeError(f"scene must be at least 16x16, got {H}x{W}")
    if materials < 0:
        raise ConfigError("materials must be >= 0")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 21))
    sites = rng.uniform(0, 1, size=(n, 2)) * (H, W)
    yy, xx = np.mgrid[0:H, 0:W]
    d2 = (yy[..., None] - sites[:, 0]) ** 2 + (xx[..., None] - sites[:, 1]) ** 2
    labels = d2.argmin(axis=-1)
    if materials:
        pick = rng.integers(0, materials, size=n)
        tilt = rng.uniform(-0.1, 0.1, size=n)
        ramp = (WAVELENGTHS - 550.0) / 150.0
        spectra = material_library(materials)[pick] * (1.0 + tilt[:, None] * ramp)
    else:
        spectra = np.stack([random_spectrum(rng) for _ in range(n)])      # n, 31

    fy, fx = rng.uniform(-1.0, 1.0, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    shade = 0.8 + 0.2 * np.cos(2 * np.pi * (fy * yy / H + fx * xx / W) + phase)

    cube = spectra[labels].transpose(2, 0, 1) * shade
    cube /= cube.max()
    return np.clip(cube.astype(dtype), 0.0, 1.0)


def sample_patch(rgb, cube, size, rng):
    """Crop the same random ``size`` x ``size`` window from both images."""
    H, W = cube.shape[-2:]
    if size > min(H, W) or size % 8:
        raise ShapeError(f"patch size {size} must be a multiple of 8 and <= {min(H, W)}")
    if rgb.shape[-2:] != (H, W):
        raise ShapeError(f"rgb {rgb.shape} and cube {cube.shape} differ spatially")
    top = int(rng.integers(0, H - size + 1))
    left = int(rng.integers(0, W - size + 1))
    sl = (Ellipsis, slice(top, top + size), slice(left, left + size))
    return rgb[sl], cube[sl]


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def save_cube(path, cube):
    """Write a ``(B, H, W)`` array as an HSC1 container (f32, band-major)."""
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ShapeError(f"container holds (B, H, W) arrays, got {cube.shape}")
    B, H, W = cube.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CUBE_MAGIC, H, W, B))
        fh.write(np.ascontiguousarray(cube, dtype="<f4").tobytes())


def load_cube(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"header truncated: {_HEADER.size - len(raw)} bytes missing",
                          path, len(raw))
    magic, H, W, B = _HEADER.unpack_from(raw)
    if magic != CUBE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CUBE_MAGIC!r}", path, 0)
    need = _HEADER.size + 4 * H * W * B
    if len(raw) < need:
        raise FormatError(f"data truncated: {need - len(raw)} bytes missing", path, len(raw))
    if len(raw) > need:
        raise FormatError(f"{len(raw) - need} trailing bytes", path, need)
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(B, H, W)
    return data.astype(np.float32)


def save_rgb(path, rgb):
    """``.png`` -> 16-bit PNG; anything else -> HSC1 container with B=3."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"rgb must be (3, H, W), got {rgb.shape}")
    if Path(path).suffix.lower() != ".png":
        save_cube(path, rgb)
        return
    q = np.round(np.clip(rgb, 0.0, 1.0) * 65535).astype(np.uint16)
    H, W = q.shape[1:]
    rows = q.transpose(1, 2, 0).reshape(H, W * 3)
    with open(path, "wb") as fh:
        png.Writer(W, H, greyscale=False, bitdepth=16).write(fh, rows)


def load_rgb(path):
    if Path(path).suffix.lower() != ".png":
        rgb = load_cube(path)
        if rgb.shape[0] != 3:
            raise FormatError(f"expected 3 channels, found {rgb.shape[0]}", path, 12)
        return rgb
    try:
        W, H, rows, info = png.Reader(filename=str(path)).asRGB()
        arr = np.vstack([np.asarray(r, dtype=np.uint16) for r in rows])
    except png.Error as exc:
        raise FormatError(f"unreadable PNG: {exc}", path) from exc
    scale = 2 ** info["bitdepth"] - 1
    return (arr.reshape(H, W, 3).transpose(2, 0, 1) / scale).astype(np.float32)


def save_response(path, resp):
    np.savetxt(path, check_response(resp), delimiter=",", fmt="%.17g",
               header="R,G,B", comments="")


def load_response(path):
    try:
        resp = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"unreadable response CSV: {exc}", path) from exc
    if resp.shape != (BANDS, 3):
        raise FormatError(f"response CSV must hold {BANDS} rows x 3 columns, got {resp.shape}",
                          path)
    return resp


def save_png8(path, rgb8):
    """Write an (H, W, 3) uint8 array."""
    H, W = rgb8.shape[:2]
    with open(path, "wb") as fh:
        png.Writer(W, H, greyscale=False, bitdepth=8).write(fh, rgb8.reshape(H, W * 3))


# ---------------------------------------------------------------------------
# Datasets on disk
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    name: str
    rgb: np.ndarray
    cube: np.ndarray


def write_dataset(out, count, size=(64, 64), seed=0, resp=None,
                  degrade: DegradeConfig = DegradeConfig(), materials=MATERIALS):
    """Generate ``count`` scenes under ``out/``.

    Layout: ``response.csv``, ``cubes/scene_XXXX.hsc``, ``rgb_clean/scene_XXXX.png``
    and ``rgb_real/scene_XXXX.png``.
    """
    out = Path(out)
    resp = default_response() if resp is None else check_response(resp)
    for sub in ("cubes", "rgb_clean", "rgb_real"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    save_response(out / "response.csv", resp)
    names = []
    for i in range(count):
        name = f"scene_{i:04d}"
        cube = gen_synthetic_scene([seed, i], size, materials=materials)
        rgb = render_rgb(cube, resp)
        save_cube(out / "cubes" / f"{name}.hsc", cube)
        save_rgb(out / "rgb_clean" / f"{name}.png", rgb)
        save_rgb(out / "rgb_real" / f"{name}.png", degrade_real_world(rgb, degrade, [seed, i, 1]))
        names.append(name)
    return names


def load_dataset(root, track="clean"):
    """Read every ``cubes/*.hsc`` with its RGB rendering for ``track``."""
    root = Path(root)
    rgb_dir = root / ("rgb_clean" if track == "clean" else "rgb_real")
    cube_paths = sorted((root / "cubes").glob("*.hsc"))
    if not cube_paths:
        raise FormatError("no cubes found", root / "cubes")
    samples = []
    for cp in cube_paths:
        candidates = [rgb_dir / f"{cp.stem}.png", rgb_dir / f"{cp.stem}.hsc"]
        rp = next((p for p in candidates if p.exists()), None)
        if rp is None:
            raise FormatError(f"missing RGB for {cp.stem}", rgb_dir)
        samples.append(Sample(cp.stem, load_rgb(rp), load_cube(cp)))
    return samples


def synthetic_samples(count, size=(64, 64), seed=0, resp=None, track="clean",
                      degrade: DegradeConfig = DegradeConfig(), materials=MATERIALS):
    """In-memory equivalent of ``write_dataset`` + ``load_dataset`` (no PNG rounding)."""
    resp = default_response() if resp is None else resp
    out = []
    for i in range(count):
        cube = gen_synthetic_scene([seed, i], size, materials=materials)
        rgb = render_rgb(cube, resp).astype(np.float32)
        if track != "clean":
            rgb = degrade_real_world(rgb, degrade, [seed, i, 1])
        out.append(Sample(f"scene_{i:04d}", rgb, cube))
    return out
