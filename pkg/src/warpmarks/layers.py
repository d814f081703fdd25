"""Differentiable layer stack: conv / batchnorm / relu / maxpool / spatial-softmax.

Tensors are torch tensors in (batch, height, width, channels) layout at the
module boundary; torch autograd supplies reverse-mode differentiation behind
the explicit forward/backward surface.  All math runs on CPU in the dtype of
the parameters (float32 for training, float64 for gradient checks).
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np
import torch
import torch.nn.functional as F

from .tps import ConfigError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1  # running = (1 - momentum) * running + momentum * batch


class UsageError(RuntimeError):
    """API misuse (missing cached state, mismatched call order)."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | batchnorm | relu | maxpool | spatial-softmax
    kernel_size: int = 0
    in_channels: int = 0
    out_channels: int = 0
    padding: int = 0
    window: int = 0
    stride: int = 1

    def validate(self, index: int) -> None:
        if self.kind not in ("conv", "batchnorm", "relu", "maxpool", "spatial-softmax"):
            raise ConfigError(f"layer {index}: unknown kind {self.kind!r}")
        if self.kind == "conv" and self.out_channels <= 0:
            raise ConfigError(f"layer {index}: conv out_channels must be > 0")
        if self.kind == "maxpool" and self.stride < 1:
            raise ConfigError(f"layer {index}: maxpool stride must be >= 1")


def init_params(layers: list[LayerSpec], rng: np.random.Generator | int,
                weight_std: float = 0.01, dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
    """Gaussian conv weights, unit batchnorm scale, zero shift/running mean.

    Conv layers carry no bias; the following batchnorm shift plays that role.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params: dict[str, torch.Tensor] = {}
    for i, spec in enumerate(layers):
        spec.validate(i)
        if spec.kind == "conv":
            w = rng.normal(0.0, weight_std,
                           size=(spec.out_channels, spec.in_channels,
                                 spec.kernel_size, spec.kernel_size))
            params[f"layer{i}.weight"] = torch.tensor(w, dtype=dtype)
        elif spec.kind == "batchnorm":
            c = spec.out_channels
            params[f"layer{i}.scale"] = torch.ones(c, dtype=dtype)
            params[f"layer{i}.shift"] = torch.zeros(c, dtype=dtype)
            params[f"layer{i}.running_mean"] = torch.zeros(c, dtype=dtype)
            params[f"layer{i}.running_var"] = torch.ones(c, dtype=dtype)
    return params


def learnable_names(params: dict[str, torch.Tensor]) -> list[str]:
    return [n for n in params if "running_" not in n]


def pooling_factor(layers: list[LayerSpec]) -> int:
    f = 1
    for spec in layers:
        if spec.kind == "maxpool":
            f *= spec.stride
    return f


def forward(layers: list[LayerSpec], params: dict[str, torch.Tensor],
            x: torch.Tensor, mode: str = "eval") -> tuple[torch.Tensor, SimpleNamespace]:
    """Run the stack on a (B, H, W, C) tensor; returns output and a cache.

    In train mode batchnorm uses batch statistics and updates running
    statistics in place; eval mode is a pure per-channel affine map.
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 4:
        raise ConfigError(f"input must be 4-D (B, H, W, C), got shape {tuple(x.shape)}")
    training = mode == "train"
    leaf = x.detach().clone().requires_grad_(training)
    learnables = [params[n] for n in learnable_names(params)]
    if training:
        for t in learnables:
            t.requires_grad_(True)

    grad_mode = torch.enable_grad() if training else torch.no_grad()
    with grad_mode:
        h = leaf.permute(0, 3, 1, 2)  # NCHW internally
        for i, spec in enumerate(layers):
            if spec.kind == "conv":
                if h.shape[1] != spec.in_channels:
                    raise ConfigError(
                        f"layer {i} (conv): expected {spec.in_channels} input "
                        f"channels, got {h.shape[1]}")
                h = F.conv2d(h, params[f"layer{i}.weight"], padding=spec.padding)
            elif spec.kind == "batchnorm":
                if h.shape[1] != spec.out_channels:
                    raise ConfigError(
                        f"layer {i} (batchnorm): expected {spec.out_channels} "
                        f"channels, got {h.shape[1]}")
                h = F.batch_norm(h, params[f"layer{i}.running_mean"],
                                 params[f"layer{i}.running_var"],
                                 params[f"layer{i}.scale"], params[f"layer{i}.shift"],
                                 training=training, momentum=BN_MOMENTUM, eps=BN_EPS)
            elif spec.kind == "relu":
                h = F.relu(h)
            elif spec.kind == "maxpool":
                h = F.max_pool2d(h, kernel_size=spec.window, stride=spec.stride)
            elif spec.kind == "spatial-softmax":
                b, c, hh, ww = h.shape
                flat = h.reshape(b, c, hh * ww)
                h = F.softmax(flat, dim=2).reshape(b, c, hh, ww)
        out = h.permute(0, 2, 3, 1)
    if training and not torch.isfinite(out).all():
        raise FloatingPointError("non-finite values in forward output")
    cache = SimpleNamespace(output=out, leaf=leaf, params=params, mode=mode)
    return out.detach() if not training else out, cache


def backward(cache: SimpleNamespace | None,
             grad_output: torch.Tensor) -> tuple[dict[str, torch.Tensor], torch.Tensor]:
    """Gradients of <output, grad_output> w.r.t. every learnable and the input."""
    if cache is None or cache.mode != "train":
        raise UsageError("backward requires a cache from a train-mode forward pass")
    if grad_output.shape != cache.output.shape:
        raise ConfigError(
            f"grad_output shape {tuple(grad_output.shape)} does not match "
            f"forward output shape {tuple(cache.output.shape)}")
    names = learnable_names(cache.params)
    tensors = [cache.leaf] + [cache.params[n] for n in names]
    grads = torch.autograd.grad(cache.output, tensors, grad_outputs=grad_output,
                                allow_unused=True)
    param_grads = {}
    for n, g, t in zip(names, grads[1:], tensors[1:]):
        param_grads[n] = g if g is not None else torch.zeros_like(t)
    input_grad = grads[0] if grads[0] is not None else torch.zeros_like(cache.leaf)
    return param_grads, input_grad
