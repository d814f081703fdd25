"""Landmark detector: image -> score maps -> probability maps -> coordinates.

Six conv-batchnorm-relu blocks with (20, 48, 64, 80, 256, K) filters and a
single 2x2 stride-2 max pool after the first block, so an even H x W input
yields H/2 x W/2 x K score maps.  A spatial softmax turns each score map
into a distribution over cells and the soft argmax takes its expectation
over normalized cell-center coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np
import torch

from . import layers as L
from .tps import ConfigError, cell_centers

FILTER_COUNTS = (20, 48, 64, 80, 256)
KERNEL_SIZES = (5, 5, 3, 3, 3, 3)
WEIGHT_INIT_STD = 0.01


def detector_layers(k: int, in_channels: int) -> list[L.LayerSpec]:
    """Architecture spec; same-padding convs keep the spatial size, the pool
    after the first block halves it."""
    if k < 1:
        raise ConfigError(f"landmark count must be >= 1, got {k}")
    channels = FILTER_COUNTS + (k,)
    specs: list[L.LayerSpec] = []
    prev = in_channels
    for i, (c, ks) in enumerate(zip(channels, KERNEL_SIZES)):
        specs.append(L.LayerSpec("conv", kernel_size=ks, in_channels=prev,
                                 out_channels=c, padding=ks // 2))
        specs.append(L.LayerSpec("batchnorm", out_channels=c))
        specs.append(L.LayerSpec("relu"))
        if i == 0:
            specs.append(L.LayerSpec("maxpool", window=2, stride=2))
        prev = c
    return specs


@dataclass
class Detector:
    k: int
    in_channels: int
    layers: list[L.LayerSpec]
    params: dict[str, torch.Tensor]

    @classmethod
    def create(cls, k: int, in_channels: int = 1,
               rng: np.random.Generator | int = 0,
               dtype: torch.dtype = torch.float32) -> "Detector":
        specs = detector_layers(k, in_channels)
        params = L.init_params(specs, rng, weight_std=WEIGHT_INIT_STD, dtype=dtype)
        return cls(k=k, in_channels=in_channels, layers=specs, params=params)


def score_maps(det: Detector, image: torch.Tensor,
               mode: str = "eval") -> tuple[torch.Tensor, SimpleNamespace]:
    """(B, H, W, C) image -> (B, H/2, W/2, K) scores plus the forward cache."""
    if image.ndim != 4:
        raise ConfigError(f"expected 4-D input, got shape {tuple(image.shape)}")
    _, h, w, c = image.shape
    if h % 2 or w % 2 or h < 8 or w < 8:
        raise ConfigError(f"input spatial dims must be even and >= 8, got {h}x{w}")
    if c != det.in_channels:
        raise ConfigError(f"expected {det.in_channels} input channels, got {c}")
    return L.forward(det.layers, det.params, image, mode)


def spatial_softmax(scores: torch.Tensor) -> torch.Tensor:
    """Per-channel softmax over all cells, max-subtracted for stability."""
    b, h, w, k = scores.shape
    flat = scores.reshape(b, h * w, k)
    flat = flat - flat.max(dim=1, keepdim=True).values
    e = flat.exp()
    return (e / e.sum(dim=1, keepdim=True)).reshape(b, h, w, k)


def soft_argmax(maps: torch.Tensor) -> torch.Tensor:
    """Expected (x, y) cell-center coordinate per map, shape (B, K, 2)."""
    b, h, w, k = maps.shape
    grid = torch.from_numpy(cell_centers(h, w)).to(maps.dtype)  # (H, W, 2)
    # (B, H, W, K, 2) contraction without materializing the product
    px = (maps * grid[None, :, :, 0, None]).sum(dim=(1, 2))
    py = (maps * grid[None, :, :, 1, None]).sum(dim=(1, 2))
    return torch.stack([px, py], dim=2)


def detect(det: Detector, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Eval-mode probability maps and landmark coordinates."""
    scores, _ = score_maps(det, image, mode="eval")
    maps = spatial_softmax(scores)
    return maps, soft_argmax(maps)
