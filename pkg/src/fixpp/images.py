"""Minimal image IO: 8-bit RGB PNG and PPM only."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

SUPPORTED_FORMATS = ("PNG", "PPM")


def load_image(path) -> np.ndarray:
    """Load an 8-bit RGB image as an (H, W, 3) uint8 array."""
    with Image.open(path) as img:
        if img.format not in SUPPORTED_FORMATS:
            raise ValueError(
                f"unsupported image format {img.format!r} for {path}; "
                f"expected one of {SUPPORTED_FORMATS}"
            )
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def save_png(array: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path, format="PNG")


def list_images(directory) -> list[str]:
    """Image files in a directory, sorted by name."""
    exts = (".png", ".ppm")
    return sorted(
        os.path.join(directory, f)
        for f in os.listdir(directory)
        if f.lower().endswith(exts)
    )
