"""Synthetic editing corpus: random blob images with one channel inverted inside a fixed mask."""

from typing import List, NamedTuple, Tuple

import numpy as np
import torch

from config.settings import DiffusionDefaults
from src.editor.types import EditPair
from src.utils.exceptions import InvalidArgumentError

INVERT_TOKEN = 5


class EditCorpus(NamedTuple):
    pairs: List[EditPair]
    mask: np.ndarray  # (H, W) bool
    channel: int


def box_mask(size: int, box: Tuple[float, float, float, float] = (0.25, 0.25, 0.75, 0.75)) -> np.ndarray:
    """Boolean mask of a box given as fractions (top, left, bottom, right)."""
    mask = np.zeros((size, size), dtype=bool)
    top, left, bottom, right = (int(round(v * size)) for v in box)
    mask[top:bottom, left:right] = True
    return mask


def random_blob_image(size: int, rng: np.random.Generator, blobs: int = 3) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    image = np.broadcast_to(rng.uniform(0.1, 0.4, 3), (size, size, 3)).copy()
    for _ in range(blobs):
        cy, cx = rng.uniform(0, size, 2)
        radius = rng.uniform(0.1, 0.3) * size
        weight = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))[..., None]
        image = (1 - weight) * image + weight * rng.uniform(0.2, 0.9, 3)
    return np.clip(image, 0.0, 1.0)


def invert_channel(image: np.ndarray, mask: np.ndarray, channel: int) -> np.ndarray:
    edited = image.copy()
    edited[..., channel] = np.where(mask, 1.0 - image[..., channel], image[..., channel])
    return edited


def make_edit_corpus(
    n: int,
    size: int = 32,
    seed: int = 0,
    channel: int = 0,
    text: Tuple[int, ...] = (INVERT_TOKEN,),
) -> EditCorpus:
    if n <= 0:
        raise InvalidArgumentError("corpus size must be positive")
    if DiffusionDefaults.V_TOKEN in text:
        raise InvalidArgumentError("base corpus text must not use the personalization token")
    rng = np.random.default_rng(seed)
    mask = box_mask(size)
    pairs = []
    for _ in range(n):
        source = random_blob_image(size, rng)
        edited = invert_channel(source, mask, channel)
        pairs.append(
            EditPair(
                torch.as_tensor(source, dtype=torch.float32),
                torch.as_tensor(edited, dtype=torch.float32),
                tuple(text),
            )
        )
    return EditCorpus(pairs, mask, channel)
