"""
Network size across width scales
================================

Count parameters, multiply-accumulates and checkpoint bytes for the four
width settings, then run one forward pass with each.
"""

import time

import numpy as np

from specrecon import ArchConfig, init_params, model_report, predict
from specrecon.model import WIDTH_SCALES

print(f"{'scale':>6} {'params (M)':>11} {'GMACs @482x512':>15} {'weights (MB)':>13}")
prev = None
for s in WIDTH_SCALES:
    rep = model_report(ArchConfig(width_scale=s))
    row = rep.as_row()
    print(f"{s:>6} {row['params_m']:>11.3f} {row['macs_g']:>15.2f} {row['weights_mb']:>13.2f}")
    if prev is not None:
        print(f"{'':>6} ratio to previous: {prev / rep.params:.2f}")
    prev = rep.params

# a forward pass keeps the spatial size and maps 3 channels to 31
rgb = np.random.default_rng(0).random((3, 64, 64)).astype(np.float32)
for s in WIDTH_SCALES:
    params = init_params(ArchConfig(width_scale=s), seed=0, requires_grad=False)
    t = time.perf_counter()
    cube = predict(rgb, params)
    print(f"width {s}: {rgb.shape} -> {cube.shape} in {time.perf_counter() - t:.2f}s")
