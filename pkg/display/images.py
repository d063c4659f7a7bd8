#!/usr/bin/env python3
"""
Image files for sampled batches: 8-bit grayscale PNG and PGM through Pillow, plus image grids.
"""

import logging
import os
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_FORMATS = ("png", "pgm")


def to_uint8(images: np.ndarray) -> np.ndarray:
    """Map pixel values in [-1, 1] to 0..255 (out-of-range values are clipped)."""
    scaled = (np.clip(np.asarray(images, dtype=np.float64), -1.0, 1.0) + 1.0) * 127.5
    return np.rint(scaled).astype(np.uint8)


def write_image(path: str, image: np.ndarray):
    """Write one 2-D uint8 image; the file format follows the extension (.png or .pgm)."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError(f"Grayscale output needs a 2-D uint8 image, got {image.shape} {image.dtype}")
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image), mode="L").save(path)


def read_image(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def make_grid(images: np.ndarray, cols: Optional[int] = None, pad: int = 1) -> np.ndarray:
    """
    Tile [N, 1, H, W] images (values in [-1, 1]) into one uint8 grid.

    Padding pixels are black.
    """
    pixels = to_uint8(images)[:, 0]
    n, h, w = pixels.shape
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y:y + h, x:x + w] = pixels[i]
    return grid


def comparison_grid(top: np.ndarray, bottom: np.ndarray, pad: int = 1) -> np.ndarray:
    """Two image rows, `top` above `bottom`, for side-by-side inspection."""
    if top.shape != bottom.shape:
        raise ValueError(f"comparison rows differ in shape: {top.shape} vs {bottom.shape}")
    return make_grid(np.concatenate([top, bottom], axis=0), cols=len(top), pad=pad)


def save_samples(directory: str, images: np.ndarray, prefix: str = "sample",
                 formats: Sequence[str] = IMAGE_FORMATS) -> List[str]:
    """One file per image and format plus a grid per format; returns the written paths, grids last."""
    unknown = [f for f in formats if f not in IMAGE_FORMATS]
    if unknown or not formats:
        raise ValueError(f"Image formats must be drawn from {IMAGE_FORMATS}, got {list(formats)}")
    paths = []
    pixels = to_uint8(images)
    for i in range(len(images)):
        for ext in formats:
            path = os.path.join(directory, f"{prefix}_{i:04d}.{ext}")
            write_image(path, pixels[i, 0])
            paths.append(path)
    grid = make_grid(images)
    for ext in formats:
        grid_path = os.path.join(directory, f"{prefix}_grid.{ext}")
        write_image(grid_path, grid)
        paths.append(grid_path)
    logger.info(f"Wrote {len(images)} images ({', '.join(formats)}) to {directory}")
    return paths
