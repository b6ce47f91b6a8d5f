"""PNG reading and writing (Pillow-backed)."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .errors import DataError


def read_png(path: str | os.PathLike, mode: str | None = None) -> np.ndarray:
    """Read a PNG as uint8: (H, W) for grayscale, (H, W, 3) for colour.

    ``mode`` forces a Pillow mode ("L" or "RGB").
    """
    try:
        with Image.open(path) as im:
            im.load()
            if mode is None:
                mode = "L" if im.mode in ("1", "L", "I", "I;16", "F", "LA") else "RGB"
            return np.asarray(im.convert(mode), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image '{path}': {exc}") from exc


def write_png(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise DataError(f"refusing to write non-uint8 image to '{path}' (dtype {img.dtype})")
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    Image.fromarray(img).save(path, format="PNG")
