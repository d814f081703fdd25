"""Dataset ingestion, preprocessing geometry, and Siamese triplet synthesis.

Images are (H, W, C) float32 arrays in [0, 1].  Annotations are normalized
(x, y) coordinates under the pixel-center convention of :mod:`warpmarks.tps`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .tps import (AffineMap, ComposedMap, ConfigError, PointMap, TpsWarp,
                  WarpSamplerConfig, compose, identity_map, pixel_to_norm,
                  sample_tps, warp_image)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    """Malformed input file."""


@dataclass
class Sample:
    image: np.ndarray                     # (H, W, C) float32 in [0, 1]
    identifier: str
    annotations: np.ndarray | None = None  # (M, 2) normalized coords
    label: int | None = None


@dataclass(frozen=True)
class PreprocessSpec:
    """Geometry applied before warping: resize, pad, then (after the warp)
    center-crop.  ``channels`` selects grayscale (1) or color (3)."""

    resize_to: int | None = None
    pad: int = 0
    pad_value: float = 0.0
    crop_to: int | None = None
    channels: int = 1

    def validate(self) -> None:
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.pad < 0:
            raise ConfigError("pad must be >= 0")
        if self.crop_to is not None and self.padded_size is not None \
                and self.crop_to > self.padded_size:
            raise ConfigError("crop_to exceeds the padded size")

    @property
    def padded_size(self) -> int | None:
        if self.resize_to is None:
            return None
        return self.resize_to + 2 * self.pad

    @property
    def final_size(self) -> int | None:
        if self.crop_to is not None:
            return self.crop_to
        return self.padded_size


@dataclass
class Triplet:
    x: np.ndarray           # (H, W, C) float32
    xp: np.ndarray          # same shape
    g: PointMap             # maps x' coords to x coords (both in final frames)
    g1: TpsWarp
    g2: TpsWarp


def _read_exact(f, n: int, path: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"{path}: truncated file (wanted {n} bytes, got {len(buf)})")
    return buf


def load_idx(images_path, labels_path=None, digit: int | None = None) -> list[Sample]:
    """Load an IDX image file (and optional label file), big-endian.

    ``digit`` keeps only samples with that label and requires ``labels_path``.
    """
    images_path = Path(images_path)
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, str(images_path)))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"{images_path}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        payload = _read_exact(f, count * rows * cols, str(images_path))
        if f.read(1):
            raise FormatError(f"{images_path}: trailing bytes after image payload")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)

    labels = None
    if labels_path is not None:
        labels_path = Path(labels_path)
        with open(labels_path, "rb") as f:
            magic, lcount = struct.unpack(">II", _read_exact(f, 8, str(labels_path)))
            if magic != IDX_LABELS_MAGIC:
                raise FormatError(
                    f"{labels_path}: bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
            labels = np.frombuffer(_read_exact(f, lcount, str(labels_path)), dtype=np.uint8)
        if lcount != count:
            raise FormatError(f"label count {lcount} does not match image count {count}")
    elif digit is not None:
        raise FormatError("digit filter requires a labels file")

    samples = []
    for i in range(count):
        label = int(labels[i]) if labels is not None else None
        if digit is not None and label != digit:
            continue
        img = (pixels[i].astype(np.float32) / 255.0)[:, :, None]
        samples.append(Sample(image=img, identifier=f"{images_path.name}[{i}]", label=label))
    return samples


def _load_image(path: Path, channels: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def parse_annotation_file(path) -> dict[str, np.ndarray]:
    """Annotation text format: one line per image, image name followed by
    2M whitespace-separated pixel coordinates (x1 y1 x2 y2 ...)."""
    table: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        name, values = fields[0], fields[1:]
        if len(values) % 2 != 0 or not values:
            raise FormatError(f"{path}:{lineno}: expected an even, positive number "
                              f"of coordinates, got {len(values)}")
        try:
            coords = np.array([float(v) for v in values], dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        table[name] = coords.reshape(-1, 2)
    return table


def load_image_dir(directory, annotation_file=None, channels: int = 1) -> list[Sample]:
    """Load every PNG/PGM image in a directory, lexicographically ordered."""
    directory = Path(directory)
    paths = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in (".png", ".pgm"))
    annotations = parse_annotation_file(annotation_file) if annotation_file else {}
    known = {p.name for p in paths}
    for name in annotations:
        if name not in known:
            raise FormatError(f"{annotation_file}: annotated image not found: {name}")

    samples = []
    m = None
    for p in paths:
        img = _load_image(p, channels)
        ann = None
        if p.name in annotations:
            pix = annotations[p.name]
            if m is None:
                m = pix.shape[0]
            elif pix.shape[0] != m:
                raise FormatError(f"{p.name}: expected {m} annotated points, got {pix.shape[0]}")
            ann = pixel_to_norm(pix, (img.shape[1], img.shape[0]))
        samples.append(Sample(image=img, identifier=p.name, annotations=ann))
    return samples


def resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize via identity-map inverse warping."""
    return warp_image(image, identity_map, out_size=size)


def pad(image: np.ndarray, width: int, value: float) -> np.ndarray:
    if width == 0:
        return image
    return np.pad(image, ((width, width), (width, width), (0, 0)),
                  constant_values=np.float32(value))


def to_channels(image: np.ndarray, channels: int) -> np.ndarray:
    if image.shape[2] == channels:
        return image
    if channels == 1:
        return image.mean(axis=2, keepdims=True).astype(np.float32)
    return np.repeat(image, 3, axis=2)


def crop_to_full_map(full_hw: tuple[int, int], crop_hw: tuple[int, int]) -> AffineMap:
    """Normalized-coordinate map from a centered crop's frame to the full frame."""
    fh, fw = full_hw
    ch, cw = crop_hw
    oy = (fh - ch) // 2
    ox = (fw - cw) // 2
    scale = (cw / fw, ch / fh)
    offset = ((2 * ox + cw - fw) / fw, (2 * oy + ch - fh) / fh)
    return AffineMap(scale, offset)


def center_crop(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = image.shape[:2]
    ch, cw = size
    oy = (h - ch) // 2
    ox = (w - cw) // 2
    return image[oy:oy + ch, ox:ox + cw]


def preprocess_base(image: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    """Channel conversion, resize, and padding — everything before the warp."""
    spec.validate()
    out = to_channels(image, spec.channels)
    if spec.resize_to is not None:
        out = resize(out, (spec.resize_to, spec.resize_to))
    return pad(out, spec.pad, spec.pad_value)


def preprocess_plain(image: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    """Full pipeline without warping: base geometry plus the final crop."""
    out = preprocess_base(image, spec)
    if spec.crop_to is not None:
        out = center_crop(out, (spec.crop_to, spec.crop_to))
    return out


def annotation_map(original_hw: tuple[int, int], spec: PreprocessSpec) -> AffineMap:
    """Normalized-coordinate map from the original frame to the final frame.

    Resizing leaves normalized coordinates unchanged; padding shrinks them
    toward the center; cropping inverts the crop-frame map.
    """
    base = spec.resize_to if spec.resize_to is not None else original_hw[0]
    padded = base + 2 * spec.pad
    scale = base / padded
    m = AffineMap((scale, scale), (0.0, 0.0))
    if spec.crop_to is not None:
        c = crop_to_full_map((padded, padded), (spec.crop_to, spec.crop_to))
        inv = c.inverse()
        return AffineMap(inv.scale * m.scale, inv.scale * m.offset + inv.offset)
    return m


def make_triplet(sample: Sample, g1_config: WarpSamplerConfig,
                 g2_config: WarpSamplerConfig, spec: PreprocessSpec,
                 seed) -> Triplet:
    """Render a Siamese pair from one image.

    x is the padded base warped by g1; x' is rendered from the same base via
    the composed map (one resampling, no compounded blur); both are then
    center-cropped.  The stored relating map g satisfies
    x(g(v)) ~= x'(v) in the final cropped frames.
    """
    rng = np.random.default_rng(seed)
    base = preprocess_base(sample.image, spec)
    g1 = sample_tps(g1_config, rng)
    g2 = sample_tps(g2_config, rng)
    full = base.shape[:2]
    x = warp_image(base, g1, fill="edge")
    xp = warp_image(base, compose(g1, g2), fill="edge")
    g: PointMap = g2
    if spec.crop_to is not None:
        crop = (spec.crop_to, spec.crop_to)
        x = center_crop(x, crop)
        xp = center_crop(xp, crop)
        c = crop_to_full_map(full, crop)
        g = ComposedMap(c.inverse(), g2, c)
    return Triplet(x=x, xp=xp, g=g, g1=g1, g2=g2)


MNIST_PREPROCESS = PreprocessSpec(resize_to=35, pad=5, pad_value=0.0,
                                  crop_to=44, channels=1)
MNIST_G1 = WarpSamplerConfig(grid_size=5, sigma_offset=0.005, sigma_offset_extra=0.01,
                             sigma_rotate_deg=15.0, sigma_translate=0.1, sigma_scale=0.05)
MNIST_G2 = WarpSamplerConfig(grid_size=5, sigma_offset=0.005, sigma_offset_extra=0.02,
                             sigma_rotate_deg=20.0, sigma_translate=0.1, sigma_scale=0.05)
FACES_G1 = WarpSamplerConfig(grid_size=10, sigma_offset=0.001, sigma_offset_extra=0.001,
                             sigma_rotate_deg=0.0, sigma_translate=0.0, sigma_scale=0.0)
FACES_G2 = WarpSamplerConfig(grid_size=10, sigma_offset=0.001, sigma_offset_extra=0.01,
                             sigma_rotate_deg=20.0, sigma_translate=0.1, sigma_scale=0.05)
