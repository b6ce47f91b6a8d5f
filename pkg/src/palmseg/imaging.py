"""Classical image operations and the non-learned palm-line baseline.

Grayscale images are ``uint8`` arrays of shape (H, W); RGB images are
``uint8`` arrays of shape (H, W, 3). Binary images hold only 0 and 255.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError

LUMA = np.array([0.299, 0.587, 0.114])


def round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(round_half_up(x), 0, 255).astype(np.uint8)


def desaturate(rgb: np.ndarray) -> np.ndarray:
    """Luma-weighted grayscale, rounded half-up."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ContractError(f"desaturate expects an (H, W, 3) image, got shape {rgb.shape}")
    return to_uint8(rgb.astype(np.float64) @ LUMA)


def as_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    return desaturate(img) if img.ndim == 3 else img


def negative(img: np.ndarray) -> np.ndarray:
    return (255 - np.asarray(img, dtype=np.uint8)).astype(np.uint8)


def threshold(img: np.ndarray, t: int) -> np.ndarray:
    """255 where ``img >= t``, else 0."""
    if not 0 <= t <= 255:
        raise ConfigError(f"threshold must lie in 0..255, got {t}")
    return np.where(np.asarray(img) >= t, 255, 0).astype(np.uint8)


def _require_binary(img: np.ndarray, op: str) -> None:
    if not np.isin(img, (0, 255)).all():
        raise ContractError(f"{op} expects a binary 0/255 image, found values {np.unique(img)[:8].tolist()}")


def dilate(img: np.ndarray, radius: int = 1) -> np.ndarray:
    """Binary dilation with a (2r+1)^2 square; pixels beyond the border repeat the edge."""
    img = np.asarray(img, dtype=np.uint8)
    _require_binary(img, "dilate")
    if radius < 0:
        raise ConfigError(f"dilation radius must be >= 0, got {radius}")
    if radius == 0:
        return img.copy()
    h, w = img.shape
    p = np.pad(img, radius, mode="edge")
    out = np.zeros_like(img)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            np.maximum(out, p[dy : dy + h, dx : dx + w], out=out)
    return out


def gaussian_kernel(sigma: float, size: int = 3) -> np.ndarray:
    """Sampled 2-D Gaussian centred on the middle tap, normalised to unit sum."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    if size < 1 or size % 2 == 0:
        raise ConfigError(f"kernel size must be odd and positive, got {size}")
    r = size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2 * sigma**2))
    return k / k.sum()


def _correlate(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # edge-inclusive mirror border ("symmetric"), total for any image size
    kh, kw = kernel.shape
    ry, rx = kh // 2, kw // 2
    p = np.pad(img.astype(np.float64), ((ry, ry), (rx, rx)), mode="symmetric")
    h, w = img.shape
    out = np.zeros((h, w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * p[i : i + h, j : j + w]
    return out


def gaussian_blur(img: np.ndarray, sigma: float = 1.0, size: int = 3) -> np.ndarray:
    """3x3 Gaussian smoothing.

    ``uint8`` input yields a rounded ``uint8`` image; floating input (e.g. a
    probability map) yields float64.
    """
    img = np.asarray(img)
    out = _correlate(img, gaussian_kernel(sigma, size))
    return to_uint8(out) if img.dtype == np.uint8 else out


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)

# neighbour offsets (dy, dx) along the quantised gradient direction
_DIRECTIONS = ((0, 1), (1, 1), (1, 0), (1, -1))


def sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(img, dtype=np.float64)
    return _correlate(img, _SOBEL_X), _correlate(img, _SOBEL_X.T)


def non_maximum_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Thin gradient ridges to one pixel.

    A pixel survives when it is strictly greater than its predecessor along the
    gradient and at least equal to its successor, so a symmetric two-pixel
    plateau keeps exactly one pixel.
    """
    h, w = mag.shape
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    bins = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    p = np.pad(mag, 1)
    keep = np.zeros((h, w), dtype=bool)
    for b, (dy, dx) in enumerate(_DIRECTIONS):
        nxt = p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        prv = p[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        keep |= (bins == b) & (mag > prv) & (mag >= nxt)
    return np.where(keep, mag, 0.0)


def hysteresis(nms: np.ndarray, low: float, high: float) -> np.ndarray:
    weak = nms >= low
    strong = nms >= high
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return np.zeros(nms.shape, dtype=bool)
    seeded = np.zeros(n + 1, dtype=bool)
    seeded[np.unique(labels[strong])] = True
    seeded[0] = False
    return seeded[labels]


def canny(img: np.ndarray, sigma: float = 1.0, low: float = 20.0, high: float = 60.0) -> np.ndarray:
    """Canny edges as a 0/255 image.

    Stages: Gaussian smoothing (kernel radius ceil(3*sigma)), Sobel gradients,
    direction quantisation to four bins, non-maximum suppression and
    8-connected double-threshold hysteresis. Thresholds are in Sobel
    magnitude units of an 8-bit image.
    """
    if not 0 < low < high:
        raise ConfigError(f"canny needs 0 < low < high, got low={low}, high={high}")
    img = as_gray(img)
    size = 2 * int(np.ceil(3 * sigma)) + 1
    smooth = _correlate(img, gaussian_kernel(sigma, size))
    gx, gy = sobel(smooth)
    mag = np.hypot(gx, gy)
    edges = hysteresis(non_maximum_suppression(mag, gx, gy), low, high)
    return np.where(edges, 255, 0).astype(np.uint8)


@dataclass(frozen=True)
class BaselineParams:
    clahe_clip: float = 2.0
    clahe_tiles: tuple[int, int] = (8, 8)
    blur_sigma: float = 1.0
    canny_sigma: float = 1.0
    canny_low: float = 20.0
    canny_high: float = 60.0
    dilate_radius: int = 1


def baseline_pipeline(image: np.ndarray, params: BaselineParams = BaselineParams()) -> np.ndarray:
    """desaturate -> CLAHE -> negative -> blur -> Canny -> dilate; returns a 0/255 mask.

    The landmark-based palm ROI extraction of the original pipeline is not
    reproduced; the whole frame is processed.
    """
    from .data import clahe

    gray = as_gray(image)
    eq = clahe(gray, params.clahe_clip, params.clahe_tiles)
    smooth = gaussian_blur(negative(eq), params.blur_sigma)
    edges = canny(smooth, params.canny_sigma, params.canny_low, params.canny_high)
    return dilate(edges, params.dilate_radius)
