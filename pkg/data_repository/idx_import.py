"""
Import of IDX image/label file pairs (the MNIST container format).

Images use magic 0x00000803 (unsigned bytes, three dimensions), labels use
magic 0x00000801 (unsigned bytes, one dimension). Both may be gzipped.
"""
import gzip
import logging
import struct
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .datasets import ImageDataset

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
GZIP_SIGNATURE = b"\x1f\x8b"


class IDXImportError(Exception):
    """Exception raised for errors in IDX import"""

    def __init__(self, message, path=None, code=None):
        self.message = message
        self.path = path
        self.code = code

        detail = ""
        if path is not None:
            detail += f" in file '{path}'"
        if code is not None:
            detail += f" [{code}]"

        super().__init__(f"{message}{detail}")


def _read_bytes(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IDXImportError(f"Cannot read file: {e}", path=str(path), code="unreadable")
    if raw[:2] == GZIP_SIGNATURE:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise IDXImportError(f"Corrupt gzip stream: {e}", path=str(path), code="truncated")
    return raw


def read_idx(path, expected_magic: int) -> np.ndarray:
    """
    Parse one IDX file into a uint8 array

    Args:
        path: file path, optionally gzipped
        expected_magic: IMAGE_MAGIC or LABEL_MAGIC

    Returns:
        Array whose shape is the dimension list in the header.
    """
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IDXImportError("File too short for an IDX header", path=str(path), code="truncated")

    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IDXImportError(
            f"Bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}",
            path=str(path), code="bad-magic",
        )

    ndim = magic & 0xFF
    header_size = 4 + 4 * ndim
    if len(raw) < header_size:
        raise IDXImportError("Header ends before the dimension list", path=str(path), code="truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header_size])
    expected = int(np.prod(dims))
    payload = raw[header_size:]
    if len(payload) < expected:
        raise IDXImportError(
            f"Payload holds {len(payload)} bytes but dimensions {dims} need {expected}",
            path=str(path), code="truncated",
        )
    if len(payload) > expected:
        logger.warning(f"{path}: ignoring {len(payload) - expected} trailing bytes")

    return np.frombuffer(payload, dtype=np.uint8, count=expected).reshape(dims)


def _fit_image(image: np.ndarray, size: int) -> np.ndarray:
    """Centre-pad smaller images, resize larger ones with a bilinear filter."""
    height, width = image.shape
    if height == size and width == size:
        return image.astype(np.float64)
    if height <= size and width <= size:
        out = np.zeros((size, size))
        top, left = (size - height) // 2, (size - width) // 2
        out[top:top + height, left:left + width] = image
        return out
    resized = Image.fromarray(image.astype(np.uint8)).resize((size, size), Image.Resampling.BILINEAR)
    return np.asarray(resized, dtype=np.float64)


def load_idx(images_path, labels_path, image_size: Optional[int] = None,
             class_count: Optional[int] = None) -> ImageDataset:
    """
    Load an IDX image/label pair as a dataset with pixels in [0, 1]

    Args:
        images_path: path to the images file
        labels_path: path to the labels file
        image_size: target side length; None keeps the stored size
        class_count: number of classes; defaults to max(label) + 1

    Returns:
        ImageDataset with a single channel.
    """
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC).astype(np.int64)

    if images.shape[0] != labels.shape[0]:
        raise IDXImportError(
            f"{images.shape[0]} images but {labels.shape[0]} labels",
            path=str(labels_path), code="count-mismatch",
        )

    if image_size is not None and images.shape[1:] != (image_size, image_size):
        logger.info(f"fitting {images.shape[1]}x{images.shape[2]} images to {image_size}x{image_size}")
        pixels = np.stack([_fit_image(img, image_size) for img in images]) if len(images) else \
            np.zeros((0, image_size, image_size))
    else:
        pixels = images.astype(np.float64)

    if class_count is None:
        class_count = int(labels.max()) + 1 if len(labels) else 0
    elif len(labels) and int(labels.max()) >= class_count:
        raise IDXImportError(
            f"label {int(labels.max())} outside the {class_count} configured classes",
            path=str(labels_path), code="label-range",
        )

    logger.info(f"loaded {len(labels)} images from {images_path}")
    return ImageDataset(pixels[:, None] / 255.0, labels, class_count, name=Path(images_path).stem)


def write_idx(path, array: np.ndarray, compress: bool = False) -> Path:
    """Write a uint8 array as IDX; 3-d arrays get the image magic, 1-d the label magic."""
    array = np.asarray(array)
    if array.ndim not in (1, 3):
        raise IDXImportError(f"Cannot write a {array.ndim}-d array as IDX", path=str(path), code="bad-shape")
    magic = IMAGE_MAGIC if array.ndim == 3 else LABEL_MAGIC
    data = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    data += np.ascontiguousarray(array, dtype=np.uint8).tobytes()

    path = Path(path)
    path.write_bytes(gzip.compress(data, mtime=0) if compress else data)
    return path


def export_dataset(dataset: ImageDataset, images_path, labels_path) -> None:
    """Quantize a single-channel dataset to bytes and write it as an IDX pair."""
    if dataset.image_shape[0] != 1:
        raise IDXImportError("Only single-channel datasets can be exported", path=str(images_path),
                             code="bad-shape")
    quantized = np.floor(np.clip(dataset.images[:, 0], 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    write_idx(images_path, quantized)
    write_idx(labels_path, dataset.labels.astype(np.uint8))
