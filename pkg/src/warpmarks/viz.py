"""Rendering helpers: landmark overlays and warp-demo strips (PNG via PIL)."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .tps import norm_to_pixel

# fixed palette so landmark i keeps its color across images
PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 190), (0, 128, 128), (230, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
]


def to_pil(image: np.ndarray) -> Image.Image:
    arr = np.clip(image, 0.0, 1.0)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return Image.fromarray((arr * 255).astype(np.uint8))


def overlay_landmarks(image: np.ndarray, landmarks: np.ndarray,
                      radius: int = 2, upscale: int = 1) -> Image.Image:
    """Draw colored markers at normalized (x, y) landmark positions."""
    im = to_pil(image)
    if upscale > 1:
        im = im.resize((im.width * upscale, im.height * upscale), Image.NEAREST)
    draw = ImageDraw.Draw(im)
    px = norm_to_pixel(np.asarray(landmarks), (im.width, im.height))
    for i, (x, y) in enumerate(px):
        color = PALETTE[i % len(PALETTE)]
        draw.ellipse([x - radius, y - radius, x + radius, y + radius],
                     fill=color, outline=(0, 0, 0))
    return im


def image_strip(images: list[np.ndarray], gap: int = 2) -> Image.Image:
    """Horizontal strip of equally sized images with a thin separator."""
    pils = [to_pil(im) for im in images]
    h = max(p.height for p in pils)
    w = sum(p.width for p in pils) + gap * (len(pils) - 1)
    strip = Image.new("RGB", (w, h), (255, 255, 255))
    x = 0
    for p in pils:
        strip.paste(p, (x, 0))
        x += p.width + gap
    return strip
