"""Thin-plate-spline warps on normalized [-1, 1]^2 coordinates.

A warp maps OUTPUT coordinates to INPUT coordinates (the inverse-warping
convention): rendering an image through a warp samples the source image at
the mapped locations.  Points are (N, 2) float arrays ordered (x, y), where
x runs along image width and y along height.  The normalized coordinate of
pixel j on an axis of n pixels is -1 + (2j + 1) / n (pixel centers).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# Callable mapping (N, 2) points to (N, 2) points.
PointMap = Callable[[np.ndarray], np.ndarray]

_SOLVE_JITTER = 1e-8  # diagonal regularization for the TPS linear system


class ConfigError(ValueError):
    """Invalid configuration (bad sizes, sigmas, shapes)."""


@dataclass(frozen=True)
class WarpSamplerConfig:
    """Sampling parameters for random TPS + similarity warps.

    ``sigma_offset`` perturbs every destination-control-point coordinate;
    with probability ``extra_prob`` each coordinate additionally receives
    noise of scale ``sigma_offset_extra``.  The similarity part is sampled
    as rotation N(0, sigma_rotate_deg), translation N(0, sigma_translate)
    and scale N(1, sigma_scale).
    """

    grid_size: int = 10
    sigma_offset: float = 0.0
    sigma_offset_extra: float = 0.0
    sigma_rotate_deg: float = 0.0
    sigma_translate: float = 0.0
    sigma_scale: float = 0.0
    extra_prob: float = 0.5

    def validate(self) -> None:
        if self.grid_size < 2:
            raise ConfigError(f"grid_size must be >= 2, got {self.grid_size}")
        for name in ("sigma_offset", "sigma_offset_extra", "sigma_rotate_deg",
                     "sigma_translate", "sigma_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.extra_prob <= 1.0:
            raise ConfigError("extra_prob must lie in [0, 1]")


def control_grid(grid_size: int) -> np.ndarray:
    """Regular grid_size x grid_size grid spanning [-1, 1]^2, shape (G*G, 2)."""
    axis = np.linspace(-1.0, 1.0, grid_size)
    gx, gy = np.meshgrid(axis, axis)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log(r^2), with U(0) = 0.
    out = np.zeros_like(r2)
    mask = r2 > 0
    out[mask] = r2[mask] * np.log(r2[mask])
    return out


class TpsWarp:
    """A fitted thin-plate spline interpolating control correspondences.

    The spline passes through ``source[i] -> destination[i]`` exactly (up to
    solver tolerance) and extends smoothly elsewhere, decomposed into an
    affine part plus a radial-kernel deformation part.
    """

    def __init__(self, source: np.ndarray, destination: np.ndarray,
                 affine_params: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 0.0)):
        source = np.asarray(source, dtype=np.float64)
        destination = np.asarray(destination, dtype=np.float64)
        if source.shape != destination.shape or source.ndim != 2 or source.shape[1] != 2:
            raise ConfigError("source/destination must be matching (N, 2) arrays")
        self.source = source
        self.destination = destination
        # (rotation, scale, tx, ty) used when sampling; informational only,
        # the similarity is already folded into the destination points.
        self.affine_params = affine_params
        self._fit()

    def _fit(self) -> None:
        n = self.source.shape[0]
        d2 = np.sum((self.source[:, None, :] - self.source[None, :, :]) ** 2, axis=2)
        k = _tps_kernel(d2) + _SOLVE_JITTER * np.eye(n)
        p = np.concatenate([np.ones((n, 1)), self.source], axis=1)
        sys = np.zeros((n + 3, n + 3))
        sys[:n, :n] = k
        sys[:n, n:] = p
        sys[n:, :n] = p.T
        rhs = np.zeros((n + 3, 2))
        rhs[:n] = self.destination
        sol = np.linalg.solve(sys, rhs)
        self.kernel_weights = sol[:n]    # (N, 2)
        self.affine_part = sol[n:]       # (3, 2): rows 1, x, y

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        squeeze = points.ndim == 1
        pts = np.atleast_2d(points)
        d2 = np.sum((pts[:, None, :] - self.source[None, :, :]) ** 2, axis=2)
        u = _tps_kernel(d2)
        out = (np.concatenate([np.ones((pts.shape[0], 1)), pts], axis=1) @ self.affine_part
               + u @ self.kernel_weights)
        return out[0] if squeeze else out


class AffineMap:
    """Per-axis affine point map v -> a * v + b, invertible."""

    def __init__(self, scale: Sequence[float], offset: Sequence[float]):
        self.scale = np.asarray(scale, dtype=np.float64)
        self.offset = np.asarray(offset, dtype=np.float64)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.offset

    def inverse(self) -> "AffineMap":
        return AffineMap(1.0 / self.scale, -self.offset / self.scale)


class ComposedMap:
    """Functional composition of point maps: maps[0](maps[1](... p))."""

    def __init__(self, *maps: PointMap):
        self.maps = maps

    def __call__(self, points: np.ndarray) -> np.ndarray:
        out = np.asarray(points, dtype=np.float64)
        for m in reversed(self.maps):
            out = m(out)
        return out


def identity_map(points: np.ndarray) -> np.ndarray:
    return np.asarray(points, dtype=np.float64)


def compose(g1: PointMap, g2: PointMap) -> ComposedMap:
    """Point map p -> g1(g2(p))."""
    return ComposedMap(g1, g2)


def sample_tps(config: WarpSamplerConfig, rng: np.random.Generator | int) -> TpsWarp:
    """Draw a random TPS + similarity warp.

    Destination control points are the source grid plus per-element Gaussian
    offsets (optionally doubled-up with larger extra noise), mapped through a
    random similarity transform.
    """
    config.validate()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    src = control_grid(config.grid_size)
    offsets = rng.normal(0.0, 1.0, size=src.shape) * config.sigma_offset
    extra_mask = rng.random(size=src.shape) < config.extra_prob
    extra = rng.normal(0.0, 1.0, size=src.shape) * config.sigma_offset_extra
    dest = src + offsets + np.where(extra_mask, extra, 0.0)

    theta = np.deg2rad(rng.normal(0.0, 1.0) * config.sigma_rotate_deg)
    translation = rng.normal(0.0, 1.0, size=2) * config.sigma_translate
    scale = 1.0 + rng.normal(0.0, 1.0) * config.sigma_scale
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    dest = scale * dest @ rot.T + translation
    return TpsWarp(src, dest, (float(theta), float(scale),
                               float(translation[0]), float(translation[1])))


def identity_warp(grid_size: int = 5) -> TpsWarp:
    src = control_grid(grid_size)
    return TpsWarp(src, src.copy())


def pixel_to_norm(pixels: np.ndarray, size_xy: Sequence[int]) -> np.ndarray:
    """Pixel coordinates (x, y) -> normalized [-1, 1], pixel-center convention."""
    size = np.asarray(size_xy, dtype=np.float64)
    return -1.0 + (2.0 * np.asarray(pixels, dtype=np.float64) + 1.0) / size


def norm_to_pixel(norm: np.ndarray, size_xy: Sequence[int]) -> np.ndarray:
    size = np.asarray(size_xy, dtype=np.float64)
    return ((np.asarray(norm, dtype=np.float64) + 1.0) * size - 1.0) / 2.0


def cell_centers(height: int, width: int) -> np.ndarray:
    """Normalized (x, y) centers of an height x width grid, shape (H, W, 2)."""
    xs = -1.0 + (2.0 * np.arange(width) + 1.0) / width
    ys = -1.0 + (2.0 * np.arange(height) + 1.0) / height
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=2)


def bilinear_sample(image: np.ndarray, coords: np.ndarray, fill: str = "edge",
                    fill_value: float = 0.0) -> np.ndarray:
    """Sample image (H, W, C) at pixel coordinates (N, 2) ordered (x, y).

    ``fill='edge'`` replicates border pixels outside the image; ``'constant'``
    uses ``fill_value``.
    """
    h, w = image.shape[:2]
    x = coords[:, 0]
    y = coords[:, 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]

    def grab(ix, iy):
        cx = np.clip(ix, 0, w - 1)
        cy = np.clip(iy, 0, h - 1)
        vals = image[cy, cx].astype(np.float64)
        if fill == "constant":
            inside = (ix >= 0) & (ix <= w - 1) & (iy >= 0) & (iy <= h - 1)
            vals = np.where(inside[:, None], vals, fill_value)
        return vals

    v00 = grab(x0, y0)
    v01 = grab(x0 + 1, y0)
    v10 = grab(x0, y0 + 1)
    v11 = grab(x0 + 1, y0 + 1)
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def warp_image(image: np.ndarray, point_map: PointMap,
               out_size: tuple[int, int] | None = None, fill: str = "edge",
               fill_value: float = 0.0) -> np.ndarray:
    """Inverse-warp an image: output(v) = bilinear sample of image at map(v).

    ``image`` is (H, W, C); ``out_size`` is (height, width) and defaults to
    the input size.  No gradient flows through this operation; warps are
    applied to leaf inputs only.
    """
    if image.ndim != 3:
        raise ConfigError(f"warp_image expects (H, W, C) image, got shape {image.shape}")
    if out_size is None:
        out_size = image.shape[:2]
    oh, ow = out_size
    if oh < 1 or ow < 1:
        raise ConfigError(f"degenerate output size {out_size}")
    grid = cell_centers(oh, ow).reshape(-1, 2)
    mapped = np.asarray(point_map(grid), dtype=np.float64)
    px = norm_to_pixel(mapped, (image.shape[1], image.shape[0]))
    vals = bilinear_sample(image, px, fill=fill, fill_value=fill_value)
    return vals.reshape(oh, ow, image.shape[2]).astype(np.float32)
