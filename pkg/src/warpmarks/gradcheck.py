"""Finite-difference gradient verification for layers and losses.

All checks run in float64 with central differences of step 1e-3 and compare
against the analytic gradients at a relative tolerance of 1e-4.  Used both
by the test suite and the ``warpmarks gradcheck`` command.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import layers as L
from . import losses
from .detector import soft_argmax
from .tps import WarpSamplerConfig, sample_tps

FD_STEP = 1e-3
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_relative_error: float
    tolerance: float = TOLERANCE

    @property
    def ok(self) -> bool:
        return self.max_relative_error < self.tolerance


def finite_difference(fn: Callable[[list[np.ndarray]], float],
                      arrays: list[np.ndarray], step: float = FD_STEP) -> list[np.ndarray]:
    """Central-difference gradients of a scalar function of float64 arrays."""
    grads = []
    for ai, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = g.reshape(-1)
        for j in range(arr.size):
            bump = [a.copy() for a in arrays]
            bump[ai].reshape(-1)[j] += step
            hi = fn(bump)
            bump[ai].reshape(-1)[j] -= 2 * step
            lo = fn(bump)
            flat[j] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1.0)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def _uniform(rng, shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def _spaced(rng, shape, avoid_zero: bool = False):
    """Random values in [-1, 1] with pairwise gaps well above the FD step, so
    max/relu selections cannot flip under perturbation."""
    n = int(np.prod(shape))
    vals = np.linspace(-1.0, 1.0, n)
    if avoid_zero:
        vals = vals + np.where(vals >= 0, 0.05, -0.05)
    return rng.permutation(vals).reshape(shape)


def _layer_setup(kind: str, rng):
    if kind == "conv":
        spec = L.LayerSpec("conv", kernel_size=3, in_channels=3, out_channels=4, padding=1)
        x = _uniform(rng, (2, 5, 5, 3))
        params = {"layer0.weight": _uniform(rng, (4, 3, 3, 3))}
    elif kind == "batchnorm":
        spec = L.LayerSpec("batchnorm", out_channels=3)
        x = _uniform(rng, (2, 4, 4, 3))
        params = {"layer0.scale": _uniform(rng, (3,)) + 1.5,
                  "layer0.shift": _uniform(rng, (3,)),
                  "layer0.running_mean": np.zeros(3),
                  "layer0.running_var": np.ones(3)}
    elif kind == "relu":
        spec = L.LayerSpec("relu")
        # keep clear of the kink at zero where the subgradient is one-sided
        x = _spaced(rng, (2, 4, 4, 3), avoid_zero=True)
        params = {}
    elif kind == "maxpool":
        spec = L.LayerSpec("maxpool", window=2, stride=2)
        x = _spaced(rng, (2, 4, 4, 3))
        params = {}
    elif kind == "spatial-softmax":
        spec = L.LayerSpec("spatial-softmax")
        x = _uniform(rng, (2, 4, 4, 3))
        params = {}
    else:
        raise ValueError(kind)
    return spec, x, params


def check_layer(kind: str, rng: np.random.Generator) -> float:
    """Max relative error between analytic and finite-difference gradients
    for one random instance of a layer."""
    spec, x, params_np = _layer_setup(kind, rng)
    probe = None  # fixed random projection onto a scalar

    def run(arrays: list[np.ndarray]) -> float:
        nonlocal probe
        xs = arrays[0]
        names = [n for n in params_np if "running_" not in n]
        p = {n: torch.tensor(v, dtype=torch.float64)
             for n, v in zip(names, arrays[1:])}
        for n in params_np:
            if "running_" in n:
                p[n] = torch.tensor(params_np[n], dtype=torch.float64)
        out, _ = L.forward([spec], p, torch.tensor(xs, dtype=torch.float64), "train")
        if probe is None:
            probe = torch.tensor(rng.normal(size=tuple(out.shape)), dtype=torch.float64)
        return float((out * probe).sum().detach())

    names = [n for n in params_np if "running_" not in n]
    arrays = [x] + [params_np[n] for n in names]
    run(arrays)  # fixes the probe before any perturbation

    p = {n: torch.tensor(v, dtype=torch.float64, requires_grad="running_" not in n)
         for n, v in params_np.items()}
    xt = torch.tensor(x, dtype=torch.float64)
    out, cache = L.forward([spec], p, xt, "train")
    param_grads, input_grad = L.backward(cache, probe)

    numeric = finite_difference(lambda a: run(a), arrays)
    errs = [relative_error(input_grad.detach().numpy(), numeric[0])]
    for n, num in zip(names, numeric[1:]):
        errs.append(relative_error(param_grads[n].detach().numpy(), num))
    return max(errs)


def _random_probmaps(rng, shape, separated: bool = False, pool: int = 1):
    """Random normalized maps; ``separated`` rejects draws whose per-cell
    (optionally sum-pooled) channel maxima are near ties, which would flip
    under the FD perturbation."""
    while True:
        raw = rng.uniform(0.1, 1.0, size=shape)
        maps = raw / raw.sum(axis=(1, 2), keepdims=True)
        if not separated:
            return maps
        pooled = losses.sum_pool(torch.from_numpy(maps), pool).numpy()
        cells = np.sort(pooled.reshape(-1, pooled.shape[3]), axis=1)
        gaps = cells[:, -1] - cells[:, -2]
        if gaps.min() > 5 * FD_STEP:
            return maps


def _random_warp(rng) -> "sample_tps":
    cfg = WarpSamplerConfig(grid_size=4, sigma_offset=0.05, sigma_offset_extra=0.05,
                            sigma_rotate_deg=15.0, sigma_translate=0.1,
                            sigma_scale=0.05)
    return sample_tps(cfg, rng)


_LOSS_FACTORIES = {
    "align_probmaps": lambda maps, g: losses.align_loss_probmaps(maps[0], maps[1], g),
    "align_probmaps_bruteforce":
        lambda maps, g: losses.align_loss_probmaps_bruteforce(maps[0], maps[1], g),
    "div_overlap": lambda maps, g: losses.div_loss_overlap(maps[0]),
    "div_max": lambda maps, g: losses.div_loss_max(maps[0]),
    "div_pooled": lambda maps, g: losses.div_loss_pooled(maps[0], 2),
    "soft_argmax_norm":
        lambda maps, g: soft_argmax(maps[0]).pow(2).sum(),
}


def check_loss(name: str, rng: np.random.Generator) -> float:
    """Gradient check of a loss with respect to the probability-map values."""
    shape = (1, 4, 4, 3)
    pool = {"div_max": 1, "div_pooled": 2}.get(name)
    maps = [_random_probmaps(rng, shape, separated=pool is not None, pool=pool or 1),
            _random_probmaps(rng, shape)]
    g = _random_warp(rng)
    gv = losses.mapped_cell_grid(g, shape[1], shape[2])
    fn = _LOSS_FACTORIES[name]

    def run(arrays):
        ts = [torch.tensor(a, dtype=torch.float64) for a in arrays]
        return float(fn(ts, gv))

    ts = [torch.tensor(m, dtype=torch.float64, requires_grad=True) for m in maps]
    value = fn(ts, gv)
    analytic = torch.autograd.grad(value, ts, allow_unused=True)
    numeric = finite_difference(run, [m.copy() for m in maps])
    errs = []
    for a, n, t in zip(analytic, numeric, ts):
        a = a if a is not None else torch.zeros_like(t)
        errs.append(relative_error(a.numpy(), n))
    return max(errs)


LAYER_KINDS = ("conv", "batchnorm", "relu", "maxpool", "spatial-softmax")
LOSS_NAMES = tuple(_LOSS_FACTORIES)


def run_suite(instances: int = 20, seed: int = 0) -> list[CheckResult]:
    """Gradient-check every layer kind and loss term on random instances."""
    results = []
    for li, kind in enumerate(LAYER_KINDS):
        rng = np.random.default_rng([seed, 100 + li])
        worst = max(check_layer(kind, rng) for _ in range(instances))
        results.append(CheckResult(f"layer/{kind}", worst))
    for li, name in enumerate(LOSS_NAMES):
        rng = np.random.default_rng([seed, 200 + li])
        worst = max(check_loss(name, rng) for _ in range(instances))
        results.append(CheckResult(f"loss/{name}", worst))
    return results
