"""PNG and PPM image I/O plus uint8 <-> float conversions.

Images travel through the pipeline as float32 arrays in [0, 1], shaped
(H, W, 3) for color and (H, W) for masks. A mask pixel is set when its
stored luminance exceeds 127.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError

MASK_THRESHOLD = 127


def img_to_float(u8: np.ndarray) -> np.ndarray:
    return np.asarray(u8, dtype=np.float32) / np.float32(255.0)


def float_to_img(x: np.ndarray) -> np.ndarray:
    scaled = np.rint(np.clip(np.asarray(x, dtype=np.float32), 0.0, 1.0) * 255.0)
    return scaled.astype(np.uint8)


def load_image(path) -> np.ndarray:
    """Read PNG or PPM into float32 (H, W, 3) in [0, 1]."""
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"{path}: cannot read image: {exc}") from exc
    return img_to_float(arr)


def save_image(path, x: np.ndarray) -> None:
    """Write float32 (H, W, 3) in [0, 1] as PNG or PPM by extension."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != 3:
        raise FormatError(f"expected (H, W, 3) image, got {x.shape}")
    Image.fromarray(float_to_img(x)).save(Path(path))


def load_mask(path) -> np.ndarray:
    """Read an image as a bool (H, W) mask: luminance > 127 is set."""
    try:
        with Image.open(path) as im:
            gray = np.asarray(im.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"{path}: cannot read mask: {exc}") from exc
    return gray > MASK_THRESHOLD


def save_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise FormatError(f"expected (H, W) mask, got {mask.shape}")
    Image.fromarray(np.where(mask.astype(bool), 255, 0).astype(np.uint8)).save(
        Path(path))
