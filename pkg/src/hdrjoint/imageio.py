"""8/16-bit RGB image files <-> float arrays in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np


class ImageFormatError(ValueError):
    pass


def load_image(path) -> np.ndarray:
    """Read an RGB image as float32 [H, W, 3] scaled to [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageFormatError(f"{path}: unsupported or corrupt image file")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ImageFormatError(f"{path}: unsupported sample type {raw.dtype}")
    if raw.ndim == 2:
        raw = np.repeat(raw[..., None], 3, axis=2)
    elif raw.shape[2] == 4:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGRA2RGB)
    elif raw.shape[2] == 3:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    else:
        raise ImageFormatError(f"{path}: {raw.shape[2]} channels not supported")
    return (raw.astype(np.float64) / scale).astype(np.float32)


def quantize(image, bits: int = 16) -> np.ndarray:
    """Round half up to the nearest code value after clipping to [0, 1]."""
    if bits not in (8, 16):
        raise ValueError("bit depth must be 8 or 16")
    top = 2 ** bits - 1
    codes = np.floor(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * top + 0.5)
    return codes.astype(np.uint8 if bits == 8 else np.uint16)


def save_image(path, image, bits: int = 16) -> None:
    """Write a [H, W, 3] float image; the extension must name a lossless format."""
    path = Path(path)
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageFormatError(f"expected [H, W, 3] image, got {image.shape}")
    if path.suffix.lower() not in (".png", ".tif", ".tiff", ".ppm"):
        raise ImageFormatError(f"{path}: use .png, .tif or .ppm")
    codes = cv2.cvtColor(quantize(image, bits), cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), codes):
        raise OSError(f"could not write {path}")
