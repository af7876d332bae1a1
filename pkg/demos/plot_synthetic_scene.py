"""
Synthetic spectral scenes
=========================

Generate one scene, render it through the default camera response, degrade
it the way a real sensor would, and save a few band images.
"""

from pathlib import Path

import numpy as np

from specrecon import DegradeConfig, default_response, degrade_real_world, gen_synthetic_scene, render_rgb
from specrecon.cli import render_band
from specrecon.data import WAVELENGTHS, save_png8

out = Path("demo_output")
out.mkdir(exist_ok=True)

cube = gen_synthetic_scene(seed=3, size=(96, 128))
print("cube", cube.shape, "range", float(cube.min()), float(cube.max()))

# spectra are smooth: neighbouring bands differ by a few percent at most
print("mean band-to-band change", float(np.abs(np.diff(cube, axis=0)).mean()))

resp = default_response()
print("response peaks (nm):", WAVELENGTHS[resp.argmax(axis=0)])

clean = render_rgb(cube, resp)
real = degrade_real_world(clean, DegradeConfig(noise_sigma=0.01), seed=3)
print("clean vs real RGB, mean abs difference", float(np.abs(clean - real).mean()))

for name, rgb in (("clean", clean), ("real", real)):
    save_png8(out / f"scene_{name}.png", np.round(255 * rgb.transpose(1, 2, 0)).astype(np.uint8))
for nm in (400, 500, 600, 700):
    save_png8(out / f"scene_{nm}nm.png", render_band(cube, nm))
print("images written to", out)
