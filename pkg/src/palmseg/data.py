"""Dataset loading, splitting, resizing and augmentation.

Geometric transforms move image and mask through the same coordinate map
(bilinear for the image, nearest for the mask); photometric transforms never
touch the mask.
"""

from __future__ import annotations

import logging
import math
import os
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .imaging import round_half_up, to_uint8
from .io import read_png, write_png

log = logging.getLogger(__name__)

TRANSFORMS = ("hflip", "shift_scale_rotate", "brightness_contrast", "clahe")


@dataclass
class ImageSample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    split: str | None = None
    lineage: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.image.shape[:2] != self.mask.shape:
            raise DimensionError(f"sample '{self.id}': image {self.image.shape[:2]} and mask {self.mask.shape} differ")


def binarize_mask(mask: np.ndarray, level: int = 128) -> np.ndarray:
    return np.where(np.asarray(mask) >= level, 255, 0).astype(np.uint8)


def load_dataset(root: str | os.PathLike, report: list[str] | None = None) -> list[ImageSample]:
    """Load ``root/images/*.png`` paired with ``root/masks/*.png`` by stem.

    Images without a mask, masks without an image and size mismatches are
    skipped and described in ``report`` (when given) and the log.

    Raises:
        DataError: no usable pair was found.
    """
    root = Path(root)
    report = [] if report is None else report
    images = {p.stem: p for p in sorted((root / "images").glob("*.png"))}
    masks = {p.stem: p for p in sorted((root / "masks").glob("*.png"))}
    samples = []
    for stem in sorted(images):
        if stem not in masks:
            report.append(f"{images[stem]}: no matching mask")
            continue
        image = read_png(images[stem])
        mask = binarize_mask(read_png(masks[stem], mode="L"))
        if image.shape[:2] != mask.shape:
            report.append(f"{images[stem]}: image {image.shape[:2]} vs mask {mask.shape}")
            continue
        samples.append(ImageSample(stem, image, mask))
    for stem in sorted(set(masks) - set(images)):
        report.append(f"{masks[stem]}: no matching image")
    for line in report:
        log.warning("skipped %s", line)
    if not samples:
        raise DataError(f"no samples under '{root}' (expected images/*.png and masks/*.png)")
    return samples


def write_dataset(samples: Sequence[ImageSample], root: str | os.PathLike) -> None:
    """Write samples in the ``images/ masks/`` layout plus a lineage manifest."""
    root = Path(root)
    for s in samples:
        write_png(root / "images" / f"{s.id}.png", s.image)
        write_png(root / "masks" / f"{s.id}.png", s.mask)
    with open(root / "lineage.tsv", "w") as fh:
        for s in samples:
            fh.write("\t".join([s.id, *s.lineage]) + "\n")


def split(samples: Sequence[ImageSample], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> list[ImageSample]:
    """Shuffle deterministically, then assign train/val/test contiguously.

    Validation and test sizes are floored; the remainder goes to train.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(samples)
    n_val = math.floor(n * ratios[1])
    n_test = math.floor(n * ratios[2])
    n_train = n - n_val - n_test
    order = np.random.default_rng(seed).permutation(n)
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    out = [None] * n
    for label, i in zip(labels, order):
        out[i] = replace(samples[i], split=label)
    return out


# resampling

def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Sample ``img`` at float coordinates; neighbours outside contribute ``fill``."""
    h, w = img.shape[:2]
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = ys - y0
    fx = xs - x0
    src = img.astype(np.float64)
    out = 0.0
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = src[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            inside = inside if img.ndim == 2 else inside[..., None]
            vals = np.where(inside, vals, fill)
            wgt = wy * wx if img.ndim == 2 else (wy * wx)[..., None]
            out = out + wgt * vals
    return out


def _nearest(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: int = 0) -> np.ndarray:
    h, w = img.shape[:2]
    yi = np.floor(ys + 0.5).astype(int)
    xi = np.floor(xs + 0.5).astype(int)
    inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    if img.ndim == 3:
        inside = inside[..., None]
    return np.where(inside, vals, fill).astype(img.dtype)


def resize_image(img: np.ndarray, out_h: int, out_w: int, interpolation: str = "bilinear") -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    # pixel-centre aligned source coordinates
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    if interpolation == "nearest":
        yi = np.minimum(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
        xi = np.minimum(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
        return img[yi[:, None], xi[None, :]]
    yy, xx = np.meshgrid(np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1), indexing="ij")
    return to_uint8(_bilinear(img, yy, xx))


def resize_to(sample: ImageSample, size: int = 256) -> ImageSample:
    """Bilinear image / nearest mask resize to ``size`` x ``size``."""
    return replace(
        sample,
        image=resize_image(sample.image, size, size, "bilinear"),
        mask=resize_image(sample.mask, size, size, "nearest"),
    )


def hflip(sample: ImageSample) -> ImageSample:
    return replace(
        sample,
        image=sample.image[:, ::-1].copy(),
        mask=sample.mask[:, ::-1].copy(),
        lineage=[*sample.lineage, "hflip()"],
    )


@dataclass(frozen=True)
class SSRLimits:
    shift: float = 0.1
    scale: float = 0.1
    angle: float = 15.0


def affine_source_coords(h: int, w: int, dx: float, dy: float, scale: float, angle: float):
    """Source (y, x) for every output pixel of a shift/scale/rotate about the centre.

    Positive ``angle`` rotates counter-clockwise as displayed (y axis down);
    ``dx``/``dy`` are fractions of the width/height.
    """
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    a = math.radians(angle)
    cos, sin = math.cos(a), math.sin(a)
    yo, xo = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    u = xo - cx - dx * w
    v = yo - cy - dy * h
    # inverse of x' = s(cos*x + sin*y), y' = s(-sin*x + cos*y)
    xs = (cos * u - sin * v) / scale + cx
    ys = (sin * u + cos * v) / scale + cy
    return ys, xs


def shift_scale_rotate(
    sample: ImageSample,
    dx: float = 0.0,
    dy: float = 0.0,
    scale: float = 1.0,
    angle: float = 0.0,
    limits: SSRLimits = SSRLimits(),
    image_interpolation: str = "bilinear",
) -> ImageSample:
    """Affine augmentation applied in lockstep to image and mask; border fill 0."""
    if abs(dx) > limits.shift or abs(dy) > limits.shift:
        raise ConfigError(f"shift ({dx}, {dy}) exceeds limit {limits.shift}")
    if abs(scale - 1.0) > limits.scale + 1e-12 or scale <= 0:
        raise ConfigError(f"scale {scale} outside 1 +/- {limits.scale}")
    if abs(angle) > limits.angle:
        raise ConfigError(f"angle {angle} exceeds limit {limits.angle}")
    h, w = sample.mask.shape
    ys, xs = affine_source_coords(h, w, dx, dy, scale, angle)
    if image_interpolation == "nearest":
        image = _nearest(sample.image, ys, xs)
    else:
        image = to_uint8(_bilinear(sample.image, ys, xs))
    return replace(
        sample,
        image=image,
        mask=_nearest(sample.mask, ys, xs),
        lineage=[*sample.lineage, f"shift_scale_rotate(dx={dx:.6g},dy={dy:.6g},scale={scale:.6g},angle={angle:.6g})"],
    )


def adjust_brightness_contrast(image: np.ndarray, db: float, dc: float) -> np.ndarray:
    out = (image.astype(np.float64) - 128.0) * (1.0 + dc) + 128.0 + 255.0 * db
    return np.clip(round_half_up(out), 0, 255).astype(np.uint8)


def brightness_contrast(sample: ImageSample, db: float = 0.0, dc: float = 0.0, limit: float = 0.2) -> ImageSample:
    if abs(db) > limit or abs(dc) > limit:
        raise ConfigError(f"brightness/contrast ({db}, {dc}) exceed limit {limit}")
    return replace(
        sample,
        image=adjust_brightness_contrast(sample.image, db, dc),
        lineage=[*sample.lineage, f"brightness_contrast(db={db:.6g},dc={dc:.6g})"],
    )


def _clip_histogram(hist: np.ndarray, limit: int) -> np.ndarray:
    excess = int(np.maximum(hist - limit, 0).sum())
    hist = np.minimum(hist, limit)
    hist += excess // 256
    residual = excess % 256
    if residual:
        step = max(256 // residual, 1)
        hist[::step][:residual] += 1
    return hist


def _clahe_gray(img: np.ndarray, clip: float, tiles: tuple[int, int]) -> np.ndarray:
    ty, tx = tiles
    h, w = img.shape
    ph, pw = -h % ty, -w % tx
    padded = np.pad(img, ((0, ph), (0, pw)), mode="symmetric") if ph or pw else img
    th, tw = padded.shape[0] // ty, padded.shape[1] // tx
    area = th * tw
    limit = max(int(clip * area / 256), 1)

    luts = np.empty((ty, tx, 256), dtype=np.float64)
    for i in range(ty):
        for j in range(tx):
            tile = padded[i * th : (i + 1) * th, j * tw : (j + 1) * tw]
            hist = _clip_histogram(np.bincount(tile.reshape(-1), minlength=256).astype(np.int64), limit)
            luts[i, j] = np.clip(round_half_up(np.cumsum(hist) * (255.0 / area)), 0, 255)

    # bilinear blend of the four nearest tile mappings
    fy = np.arange(h) / th - 0.5
    fx = np.arange(w) / tw - 0.5
    y1 = np.floor(fy).astype(int)
    x1 = np.floor(fx).astype(int)
    ya = (fy - y1)[:, None]
    xa = (fx - x1)[None, :]
    y2 = np.clip(y1 + 1, 0, ty - 1)[:, None]
    x2 = np.clip(x1 + 1, 0, tx - 1)[None, :]
    y1 = np.clip(y1, 0, ty - 1)[:, None]
    x1 = np.clip(x1, 0, tx - 1)[None, :]
    v = img.astype(int)
    top = luts[y1, x1, v] * (1 - xa) + luts[y1, x2, v] * xa
    bot = luts[y2, x1, v] * (1 - xa) + luts[y2, x2, v] * xa
    return to_uint8(top * (1 - ya) + bot * ya)


def clahe(image: np.ndarray, clip: float = 2.0, tiles: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation.

    Per-tile histograms are clipped at ``clip * tile_area / 256`` with the
    excess spread uniformly, and tile mappings are blended bilinearly.
    Colour images are equalised channel by channel.
    """
    if not clip > 0:
        raise ConfigError(f"CLAHE clip limit must be positive, got {clip}")
    if len(tiles) != 2 or min(tiles) < 1:
        raise ConfigError(f"CLAHE tile grid must be two positive ints, got {tiles}")
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim == 3:
        return np.stack([_clahe_gray(image[..., c], clip, tiles) for c in range(image.shape[2])], axis=-1)
    return _clahe_gray(image, clip, tiles)


def apply_clahe(sample: ImageSample, clip: float = 2.0, tiles: tuple[int, int] = (8, 8)) -> ImageSample:
    return replace(
        sample,
        image=clahe(sample.image, clip, tiles),
        lineage=[*sample.lineage, f"clahe(clip={clip:.6g},tiles={tiles[0]}x{tiles[1]})"],
    )


@dataclass(frozen=True)
class AugmentConfig:
    enabled: tuple[str, ...] = TRANSFORMS
    probabilities: dict = field(default_factory=lambda: {t: 0.5 for t in TRANSFORMS})
    ssr_limits: SSRLimits = SSRLimits()
    brightness_limit: float = 0.2
    contrast_limit: float = 0.2
    clahe_clip: float = 2.0
    clahe_tiles: tuple[int, int] = (8, 8)
    image_interpolation: str = "bilinear"
    multiplier: int = 4
    seed: int = 0

    def validate(self) -> None:
        unknown = set(self.enabled) - set(TRANSFORMS)
        if unknown:
            raise ConfigError(f"unknown augmentation(s): {sorted(unknown)}")
        for name, p in self.probabilities.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probability for {name} must be in [0, 1], got {p}")
        if self.multiplier < 1:
            raise ConfigError(f"multiplier must be >= 1, got {self.multiplier}")
        if self.image_interpolation not in ("bilinear", "nearest"):
            raise ConfigError(f"image_interpolation must be bilinear or nearest, got {self.image_interpolation}")


def sample_rng(seed: int, sample_id: str, copy_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(sample_id.encode("utf-8")), copy_index]))


def augment_sample(sample: ImageSample, config: AugmentConfig, copy_index: int) -> ImageSample:
    rng = sample_rng(config.seed, sample.id, copy_index)
    out = replace(sample, id=f"{sample.id}__aug{copy_index}", lineage=list(sample.lineage))
    for name in TRANSFORMS:
        # one draw per transform slot keeps the stream aligned whatever is enabled
        fire = rng.random() < config.probabilities.get(name, 0.5)
        if name not in config.enabled or not fire:
            continue
        if name == "hflip":
            out = hflip(out)
        elif name == "shift_scale_rotate":
            lim = config.ssr_limits
            out = shift_scale_rotate(
                out,
                dx=float(rng.uniform(-lim.shift, lim.shift)),
                dy=float(rng.uniform(-lim.shift, lim.shift)),
                scale=float(rng.uniform(1 - lim.scale, 1 + lim.scale)),
                angle=float(rng.uniform(-lim.angle, lim.angle)),
                limits=lim,
                image_interpolation=config.image_interpolation,
            )
        elif name == "brightness_contrast":
            lim = max(config.brightness_limit, config.contrast_limit)
            out = brightness_contrast(
                out,
                db=float(rng.uniform(-config.brightness_limit, config.brightness_limit)),
                dc=float(rng.uniform(-config.contrast_limit, config.contrast_limit)),
                limit=lim,
            )
        else:
            out = apply_clahe(out, config.clahe_clip, config.clahe_tiles)
    return out


def augment_dataset(samples: Sequence[ImageSample], config: AugmentConfig = AugmentConfig()) -> list[ImageSample]:
    """Expand each source into ``multiplier`` samples: the original plus augmented copies.

    Copy ``k`` of sample ``id`` draws from a generator seeded by
    ``(seed, id, k)``, so the result does not depend on processing order.
    """
    config.validate()
    out = []
    for s in samples:
        out.append(replace(s, lineage=list(s.lineage)))
        for k in range(1, config.multiplier):
            out.append(augment_sample(s, config, k))
    return out
