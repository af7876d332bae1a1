"""The gradient suite: finite-difference checks of every op and of a tiny network."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import ModelParams, hrnet_forward, init_params, tiny_arch

OP_CASES = {
    "conv2d_reflect": (lambda x, w, b: T.conv2d(x, w, b), [(1, 2, 4, 4), (3, 2, 3, 3), (3,)]),
    "conv2d_zero_stride2": (lambda x, w, b: T.conv2d(x, w, b, stride=2, padding="zero"),
                            [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv2d_5x5": (lambda x, w, b: T.conv2d(x, w, b), [(1, 1, 6, 6), (2, 1, 5, 5), (2,)]),
    "conv2d_1x1": (lambda x, w: T.conv2d(x, w), [(1, 3, 3, 4), (2, 3, 1, 1)]),
    "pixel_shuffle": (lambda x: T.pixel_shuffle(x, 2), [(1, 8, 2, 3)]),
    "pixel_unshuffle": (lambda x: T.pixel_unshuffle(x, 2), [(1, 2, 4, 6)]),
    "leaky_relu": (lambda x: T.leaky_relu(x, 0.2), [(1, 3, 4, 4)]),
    "sigmoid": (lambda x: T.sigmoid(x), [(1, 3, 4, 4)]),
    "global_avg_pool": (T.global_avg_pool, [(2, 3, 3, 5)]),
    "linear": (lambda x, w, b: T.linear(x, w, b), [(3, 4, 1, 1), (5, 4), (5,)]),
    "add": (lambda a, b: T.add(a, b), [(1, 2, 3, 3), (1, 2, 3, 3)]),
    "sub": (lambda a, b: T.sub(a, b), [(1, 2, 3, 3), (1, 2, 3, 3)]),
    "mul": (lambda a, b: T.mul(a, b), [(1, 2, 3, 3), (1, 2, 3, 3)]),
    "mul_broadcast": (lambda a, b: T.mul(a, b), [(2, 3, 4, 4), (2, 3, 1, 1)]),
    "concat": (lambda a, b: T.concat([a, b]), [(1, 2, 3, 3), (1, 1, 3, 3)]),
    "abs": (T.absolute, [(1, 2, 3, 3)]),
    "mean": (T.mean, [(1, 2, 3, 3)]),
}


def end_to_end_check(seed=0, size=16, max_samples=4, tolerance=1e-3, step=1e-4):
    """Check the tiny network against finite differences at float64.

    Probes ``max_samples`` elements of the input and of every sixth weight
    tensor plus the output bias.
    """
    arch = tiny_arch()
    params = init_params(arch, seed, dtype=np.float64)
    names = list(params.tensors)
    picked = [n for n in names if n.endswith("weight")][::6] + ["out.bias"]

    def op(rgb, *ps):
        tensors = {n: params[n] for n in names}
        tensors.update(dict(zip(picked, ps)))
        return hrnet_forward(rgb, ModelParams(tensors, arch))

    rng = np.random.default_rng(seed + 1)
    inputs = [rng.random((1, 3, size, size))] + [params[n].data for n in picked]
    return T.grad_check(op, inputs=inputs, seed=seed, max_samples=max_samples,
                        tolerance=tolerance, step=step)


@dataclass
class SuiteResult:
    name: str
    seed: int
    report: T.CheckReport


def run_suite(seeds=range(5), tolerance=1e-3, step=1e-4, end_to_end=True):
    """Run every op case and the network check for each seed; returns (results, seconds)."""
    t0 = time.perf_counter()
    results = []
    for seed in seeds:
        for name, (op, shapes) in OP_CASES.items():
            results.append(SuiteResult(name, seed, T.grad_check(
                op, shapes, seed=seed, tolerance=tolerance, step=step)))
        if end_to_end:
            results.append(SuiteResult("hrnet_tiny", seed,
                                       end_to_end_check(seed, tolerance=tolerance, step=step)))
    return results, time.perf_counter() - t0
