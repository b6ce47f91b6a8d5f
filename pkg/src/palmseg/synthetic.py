"""Procedural stand-ins for palm photographs: dark curved creases on a skin-toned field."""

from __future__ import annotations

import numpy as np

from .data import ImageSample

SKIN_RGB = np.array([1.0, 0.82, 0.70])


def _bezier(p0, p1, p2, n: int = 200) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def curve_distance(h: int, w: int, points: np.ndarray) -> np.ndarray:
    """Distance from every pixel centre to the nearest of ``points`` (y, x)."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d2 = np.full((h, w), np.inf)
    for chunk in np.array_split(points, max(1, len(points) // 64)):
        dy = yy[..., None] - chunk[:, 0]
        dx = xx[..., None] - chunk[:, 1]
        d2 = np.minimum(d2, (dy * dy + dx * dx).min(axis=-1))
    return np.sqrt(d2)


def palm_lines(
    rng: np.random.Generator,
    size: int = 64,
    n_lines: int = 3,
    width: float = 3.0,
    depth: float = 80.0,
    noise: float = 6.0,
    rgb: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """One synthetic image and its 0/255 line mask.

    Each crease is a quadratic Bezier curve crossing the frame; pixels within
    ``width / 2`` of the curve are labelled positive. The image darkens along
    the curve with a soft profile, over a smooth background gradient, plus
    Gaussian noise of standard deviation ``noise``.
    """
    h = w = size
    dist = np.full((h, w), np.inf)
    for _ in range(n_lines):
        p0 = rng.uniform([0.1 * h, 0.0], [0.9 * h, 0.2 * w])
        p2 = rng.uniform([0.1 * h, 0.8 * w], [0.9 * h, 1.0 * w])
        p1 = rng.uniform([0.1 * h, 0.3 * w], [0.9 * h, 0.7 * w])
        dist = np.minimum(dist, curve_distance(h, w, _bezier(p0, p1, p2)))
    mask = np.where(dist <= width / 2, 255, 0).astype(np.uint8)

    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    background = 190 + 20 * (xx - 0.5) + rng.uniform(-10, 10) * (yy - 0.5)
    profile = depth * np.exp(-0.5 * (dist / (0.5 * width)) ** 4)
    gray = background - profile + rng.normal(0.0, noise, size=(h, w))
    if rgb:
        img = gray[..., None] * SKIN_RGB
        return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8), mask
    return np.clip(np.floor(gray + 0.5), 0, 255).astype(np.uint8), mask


def palm_dataset(n: int, seed: int = 0, **kwargs) -> list[ImageSample]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        image, mask = palm_lines(rng, **kwargs)
        out.append(ImageSample(f"synth{i:04d}", image, mask))
    return out
