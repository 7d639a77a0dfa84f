"""8-bit PNG I/O; in memory images are float arrays in [0, 1]."""

from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from src.utils.exceptions import DatasetError, MissingImageError, ShapeMismatchError


def to_uint8(image) -> np.ndarray:
    """Quantize with round-half-to-even."""
    if hasattr(image, "detach"):
        image = image.detach().cpu().numpy()
    return np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path: Union[str, Path], image) -> None:
    array = to_uint8(image)
    if array.ndim != 3 or array.shape[2] != 3:
        raise ShapeMismatchError(f"expected an (H, W, 3) image, got {array.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)


def load_image(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingImageError(path)
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def image_size(path: Union[str, Path]):
    """(width, height) read from the file header."""
    path = Path(path)
    if not path.exists():
        raise MissingImageError(path)
    with Image.open(path) as img:
        return img.size


def save_mask(path: Union[str, Path], mask) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255).save(path)


def load_mask(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingImageError(path)
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) >= 128


def load_rgba(path: Union[str, Path]) -> np.ndarray:
    """(H, W, 4) float array; images without alpha get an opaque channel."""
    path = Path(path)
    if not path.exists():
        raise MissingImageError(path)
    with Image.open(path) as img:
        return np.asarray(img.convert("RGBA"), dtype=np.float64) / 255.0


def list_images(directory: Union[str, Path]):
    """PNG files of a directory sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"image directory not found: {directory}")
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")
