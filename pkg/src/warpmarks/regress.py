"""Linear regression from frozen unsupervised landmarks to annotated ones,
the localization error metric, and the contribution-graph analysis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .adam import AdamState, adam_step
from .data import (PreprocessSpec, Sample, WarpSamplerConfig, annotation_map,
                   center_crop, crop_to_full_map, preprocess_base,
                   preprocess_plain)
from .detector import Detector, detect
from .tps import ComposedMap, ConfigError, norm_to_pixel, sample_tps, warp_image
from .trainer import params_digest


class DataError(ValueError):
    pass


@dataclass
class FitConfig:
    method: str = "adam"        # adam | ridge
    learning_rate: float = 1e-3
    steps: int = 2000
    ridge: float = 1e-4
    augment_per_sample: int = 0  # extra warped copies per image (adam path)
    seed: int = 0


@dataclass
class EvalReport:
    mean_error: float
    per_image: list[float]
    normalization: str
    skipped: int = 0


def stack_coords(coords: np.ndarray) -> np.ndarray:
    """(K, 2) (x, y) coordinates -> flat (2K,) vector (x1, y1, x2, y2, ...)."""
    return np.asarray(coords, dtype=np.float64).reshape(-1)


def _detect_np(det: Detector, image: np.ndarray) -> np.ndarray:
    x = torch.from_numpy(image[None].astype(np.float32))
    _, lm = detect(det, x)
    return lm[0].numpy().astype(np.float64)


def _require_annotations(samples: list[Sample]) -> int:
    m = None
    for s in samples:
        if s.annotations is None:
            raise DataError(f"sample {s.identifier!r} has no annotations")
        if m is None:
            m = s.annotations.shape[0]
        elif s.annotations.shape[0] != m:
            raise DataError(
                f"sample {s.identifier!r} has {s.annotations.shape[0]} annotated "
                f"points, expected {m}")
    return m


def design_matrices(det: Detector, samples: list[Sample], spec: PreprocessSpec,
                    augment: WarpSamplerConfig | None = None,
                    augment_per_sample: int = 0,
                    seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Detected-landmark features X (N, 2K) and annotation targets Y (N, 2M).

    Augmented rows warp the image before detection and map the detected
    landmarks back through the warp's point map into the unwarped frame, so
    targets never need a warp inverse.
    """
    _require_annotations(samples)
    rows_x, rows_y = [], []
    rng = np.random.default_rng(seed)
    for s in samples:
        ann = annotation_map(s.image.shape[:2], spec)(s.annotations)
        plain = preprocess_plain(s.image, spec)
        rows_x.append(stack_coords(_detect_np(det, plain)))
        rows_y.append(stack_coords(ann))
        if augment is not None:
            base = preprocess_base(s.image, spec)
            for _ in range(augment_per_sample):
                g = sample_tps(augment, rng)
                warped = warp_image(base, g, fill="edge")
                aligned = g
                if spec.crop_to is not None:
                    crop = (spec.crop_to, spec.crop_to)
                    warped = center_crop(warped, crop)
                    c = crop_to_full_map(base.shape[:2], crop)
                    aligned = ComposedMap(c.inverse(), g, c)
                lm = _detect_np(det, warped)
                rows_x.append(stack_coords(aligned(lm)))
                rows_y.append(stack_coords(ann))
    return np.stack(rows_x), np.stack(rows_y)


def fit_linear(x: np.ndarray, y: np.ndarray, config: FitConfig) -> np.ndarray:
    """Fit W (2M, 2K) minimizing mean squared error of y = W x, no bias."""
    if config.method == "ridge":
        gram = x.T @ x + config.ridge * np.eye(x.shape[1])
        return np.linalg.solve(gram, x.T @ y).T
    if config.method != "adam":
        raise ConfigError(f"unknown fit method {config.method!r}")
    xt = torch.from_numpy(x)
    yt = torch.from_numpy(y)
    params = {"w": torch.zeros(y.shape[1], x.shape[1], dtype=torch.float64)}
    state = AdamState(learning_rate=config.learning_rate)
    for _ in range(config.steps):
        params["w"].requires_grad_(True)
        loss = ((xt @ params["w"].T - yt) ** 2).mean()
        (grad,) = torch.autograd.grad(loss, params["w"])
        adam_step(params, {"w": grad}, state)
        params["w"].requires_grad_(False)
    return params["w"].numpy()


def fit_regressor(det: Detector, samples: list[Sample], spec: PreprocessSpec,
                  config: FitConfig,
                  augment: WarpSamplerConfig | None = None) -> np.ndarray:
    """Fit the landmark regressor with the detector frozen (digest-checked)."""
    before = params_digest(det.params)
    x, y = design_matrices(det, samples, spec, augment=augment,
                           augment_per_sample=config.augment_per_sample,
                           seed=config.seed)
    w = fit_linear(x, y, config)
    if params_digest(det.params) != before:
        raise RuntimeError("detector parameters changed during regressor fit")
    return w


def predict(w: np.ndarray, landmarks: np.ndarray) -> np.ndarray:
    """Map K unsupervised landmarks to M target coordinates, y = W x."""
    x = stack_coords(landmarks)
    if w.shape[1] != x.shape[0]:
        raise ConfigError(
            f"regressor expects {w.shape[1] // 2} landmarks, got {x.shape[0] // 2}")
    return (w @ x).reshape(-1, 2)


def evaluate(w: np.ndarray, det: Detector, samples: list[Sample],
             spec: PreprocessSpec, normalization: str = "iod",
             eye_indices: tuple[int, int] = (0, 1),
             warn=None) -> EvalReport:
    """Per-image mean landmark distance divided by the normalization distance.

    Distances are measured in pixels of the preprocessed frame; the
    normalization distance is the annotated inter-ocular distance or the
    image width.
    """
    if normalization not in ("iod", "width"):
        raise ConfigError(f"unknown normalization {normalization!r}")
    _require_annotations(samples)
    errors = []
    skipped = 0
    for s in samples:
        plain = preprocess_plain(s.image, spec)
        h, wpx = plain.shape[:2]
        size_xy = (wpx, h)
        gt = annotation_map(s.image.shape[:2], spec)(s.annotations)
        pred = predict(w, _detect_np(det, plain))
        gt_px = norm_to_pixel(gt, size_xy)
        pred_px = norm_to_pixel(pred, size_xy)
        if normalization == "iod":
            i, j = eye_indices
            norm_dist = float(np.linalg.norm(gt_px[i] - gt_px[j]))
        else:
            norm_dist = float(wpx)
        if norm_dist <= 0.0:
            skipped += 1
            if warn is not None:
                warn(f"skipping {s.identifier!r}: zero normalization distance")
            continue
        dists = np.linalg.norm(pred_px - gt_px, axis=1)
        errors.append(float(dists.mean() / norm_dist))
    mean = float(np.mean(errors)) if errors else float("nan")
    return EvalReport(mean_error=mean, per_image=errors,
                      normalization=normalization, skipped=skipped)


def contribution_graph(w: np.ndarray, threshold: float = 0.2) -> list[tuple[int, int, float]]:
    """Edges (source landmark, target landmark, weight) from the regressor.

    Per target, the absolute coefficients of each source landmark's (x, y)
    pair are summed, L1-normalized across sources, and entries below the
    threshold are dropped.
    """
    m2, k2 = w.shape
    if m2 % 2 or k2 % 2:
        raise ConfigError("regressor dimensions must be even")
    edges = []
    absw = np.abs(w)
    for t in range(m2 // 2):
        block = absw[2 * t:2 * t + 2]                       # (2, 2K)
        per_source = block.reshape(2, k2 // 2, 2).sum(axis=(0, 2))
        total = per_source.sum()
        if total == 0.0:
            continue
        weights = per_source / total
        for r, wt in enumerate(weights):
            if wt >= threshold:
                edges.append((r, t, float(wt)))
    return edges
