"""
Edit oracles: anything that turns a frame into its edited version.

Procedural oracles are exact pixel operations used for tests and ablations;
``DiffusionEditOracle`` exposes a personalized diffusion editor through the
same interface.
"""

import math
from abc import ABC, abstractmethod
from typing import Callable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from src.utils.exceptions import InvalidArgumentError, OracleError, ShapeMismatchError

MaskSource = Union[np.ndarray, Mapping[str, np.ndarray], Callable[[str], np.ndarray]]


def hue_rotation_matrix(degrees: float) -> np.ndarray:
    """Rotation of RGB vectors about the gray axis (1, 1, 1)/sqrt(3)."""
    theta = math.radians(degrees)
    k = np.full(3, 1.0 / math.sqrt(3.0))
    cross = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return math.cos(theta) * np.eye(3) + math.sin(theta) * cross + (1 - math.cos(theta)) * np.outer(k, k)


def mask_recolor(image: np.ndarray, mask: np.ndarray, hue: float) -> np.ndarray:
    """Hue-rotate pixels inside ``mask`` (H, W bool); outside pixels are returned untouched."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ShapeMismatchError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    recolored = np.clip(image @ hue_rotation_matrix(hue).T, 0.0, 1.0)
    return np.where(mask[..., None], recolored, image)


def overlay(image: np.ndarray, sprite: np.ndarray, anchor: Tuple[int, int]) -> np.ndarray:
    """Alpha-paste an (h, w, 4) RGBA sprite with its top-left corner at ``anchor`` = (row, col).

    Parts of the sprite outside the image are clipped; pixels with zero sprite
    alpha are left bit-identical.
    """
    image = np.asarray(image, dtype=np.float64)
    sprite = np.asarray(sprite, dtype=np.float64)
    if sprite.ndim != 3 or sprite.shape[2] != 4:
        raise ShapeMismatchError("sprite must be (h, w, 4) RGBA")
    out = image.copy()
    r0, c0 = anchor
    rows = slice(max(r0, 0), min(r0 + sprite.shape[0], image.shape[0]))
    cols = slice(max(c0, 0), min(c0 + sprite.shape[1], image.shape[1]))
    if rows.start >= rows.stop or cols.start >= cols.stop:
        return out
    patch = sprite[rows.start - r0:rows.stop - r0, cols.start - c0:cols.stop - c0]
    alpha = patch[..., 3:4]
    region = out[rows, cols]
    blended = alpha * patch[..., :3] + (1 - alpha) * region
    out[rows, cols] = np.where(alpha > 0, blended, region)
    return out


def sprite_footprint(shape: Tuple[int, int], sprite: np.ndarray, anchor: Tuple[int, int]) -> np.ndarray:
    """Boolean (H, W) mask of the pixels an overlay may change."""
    mask = np.zeros(shape, dtype=bool)
    r0, c0 = anchor
    alpha = np.asarray(sprite)[..., 3] > 0
    for r, c in zip(*np.nonzero(alpha)):
        rr, cc = r + r0, c + c0
        if 0 <= rr < shape[0] and 0 <= cc < shape[1]:
            mask[rr, cc] = True
    return mask


def _resolve_mask(source: Optional[MaskSource], frame_id: str, shape) -> Optional[np.ndarray]:
    if source is None:
        return None
    if callable(source):
        return np.asarray(source(frame_id), dtype=bool)
    if isinstance(source, Mapping):
        if frame_id not in source:
            raise OracleError(f"no mask for frame {frame_id}")
        return np.asarray(source[frame_id], dtype=bool)
    return np.asarray(source, dtype=bool)


class EditOracle(ABC):
    """edit(image, frame_id, seed) -> image of the same shape with values in [0, 1]."""

    @abstractmethod
    def edit(self, image: np.ndarray, frame_id: str, seed: int) -> np.ndarray:
        ...

    def region(self, frame_id: str, shape) -> Optional[np.ndarray]:
        """Pixels the oracle may change on ``frame_id``; None when unknown."""
        return None


class MaskRecolorOracle(EditOracle):
    def __init__(self, masks: MaskSource, hue: float):
        self.masks = masks
        self.hue = hue

    def region(self, frame_id, shape):
        return _resolve_mask(self.masks, frame_id, shape)

    def edit(self, image, frame_id, seed):
        return mask_recolor(image, self.region(frame_id, np.shape(image)[:2]), self.hue)


class OverlayOracle(EditOracle):
    def __init__(self, sprite: np.ndarray, anchor: Tuple[int, int]):
        self.sprite = np.asarray(sprite, dtype=np.float64)
        self.anchor = tuple(anchor)

    def region(self, frame_id, shape):
        return sprite_footprint(tuple(shape[:2]), self.sprite, self.anchor)

    def edit(self, image, frame_id, seed):
        return overlay(image, self.sprite, self.anchor)


class DiffusionEditOracle(EditOracle):
    """Personalized diffusion editor behind the oracle interface.

    The frame index is mixed into the seed; callers vary ``seed`` per re-edit.
    """

    def __init__(
        self,
        editor,
        text: Sequence[int],
        frame_ids: Sequence[str],
        image_guidance: Optional[float] = None,
        text_guidance: Optional[float] = None,
        steps: Optional[int] = None,
        masks: Optional[MaskSource] = None,
    ):
        self.editor = editor
        self.text = tuple(int(t) for t in text)
        self.frame_index = {fid: i for i, fid in enumerate(frame_ids)}
        self.image_guidance = image_guidance
        self.text_guidance = text_guidance
        self.steps = steps
        self.masks = masks

    def region(self, frame_id, shape):
        return _resolve_mask(self.masks, frame_id, shape)

    def edit(self, image, frame_id, seed):
        if frame_id not in self.frame_index:
            raise InvalidArgumentError(f"unknown frame {frame_id}")
        edit_seed = int(seed) + 1009 * self.frame_index[frame_id]
        mask = self.region(frame_id, np.shape(image)[:2])
        out = self.editor.sample_edit(
            torch.as_tensor(np.asarray(image), dtype=torch.float32),
            self.text,
            image_guidance=self.image_guidance,
            text_guidance=self.text_guidance,
            steps=self.steps,
            seed=edit_seed,
            mask=None if mask is None else torch.as_tensor(mask),
        )
        return out.cpu().numpy().astype(np.float64)
