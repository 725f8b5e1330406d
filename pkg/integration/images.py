"""
Binary PGM (P5) output for decoded samples
"""
import logging
from io import BytesIO
from pathlib import Path
from typing import List

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)


def quantize(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> 0..255 bytes, halves rounded up; out-of-range pixels are clamped."""
    image = np.asarray(image, dtype=np.float64)
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _grayscale(image: np.ndarray) -> Image.Image:
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ValueError(f"PGM needs a single-channel image, got shape {image.shape}")
    return Image.fromarray(quantize(image), mode="L")


def pgm_bytes(image: np.ndarray) -> bytes:
    """Encode one (H, W) or (1, H, W) image as P5 with maxval 255"""
    buffer = BytesIO()
    _grayscale(image).save(buffer, format="PPM")
    return buffer.getvalue()


def write_pgm(images, directory, prefix: str = "sample") -> List[Path]:
    """
    Write one PGM file per image

    Args:
        images: (N, 1, H, W) or (N, H, W) array with pixels in [0, 1]
        directory: output directory (created if missing)
        prefix: file name prefix; files are ``{prefix}_{index:04d}.pgm``

    Returns:
        The written paths in index order.
    """
    images = np.asarray(images, dtype=np.float64)
    clamped = int(np.count_nonzero((images < 0.0) | (images > 1.0) | ~np.isfinite(images)))
    if clamped:
        logger.warning(f"clamped {clamped} pixel values outside [0, 1] while writing PGM files")
    images = np.nan_to_num(images, nan=0.0)

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for index, image in enumerate(images):
        path = directory / f"{prefix}_{index:04d}.pgm"
        _grayscale(image).save(path, format="PPM")
        paths.append(path)
    logger.info(f"wrote {len(paths)} PGM files to {directory}")
    return paths


def read_pgm(path) -> np.ndarray:
    """Read a grayscale image back as floats in [0, 1]"""
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64) / 255.0
