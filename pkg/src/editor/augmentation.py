"""Affine augmentation applied identically to both images of an edit pair."""

import math
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from src.editor.types import EditPair


class AffineParams(NamedTuple):
    rotation: float  # degrees
    translate_x: float  # fraction of width
    translate_y: float  # fraction of height
    shear: float  # degrees

    def is_identity(self) -> bool:
        return self.rotation == 0 and self.translate_x == 0 and self.translate_y == 0 and self.shear == 0


class AffineAugmentor(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rotation: float = Field(15.0, ge=0, description="Max rotation in degrees")
    translation: float = Field(0.1, ge=0, le=1, description="Max shift as a fraction of image size")
    shear: float = Field(10.0, ge=0, description="Max shear in degrees")

    def sample(self, rng: np.random.Generator) -> AffineParams:
        return AffineParams(
            rotation=float(rng.uniform(-self.rotation, self.rotation)) if self.rotation else 0.0,
            translate_x=float(rng.uniform(-self.translation, self.translation)) if self.translation else 0.0,
            translate_y=float(rng.uniform(-self.translation, self.translation)) if self.translation else 0.0,
            shear=float(rng.uniform(-self.shear, self.shear)) if self.shear else 0.0,
        )


def affine_theta(params: AffineParams, height: int, width: int) -> torch.Tensor:
    """2x3 output-to-input sampling matrix in normalized coordinates (align_corners=False)."""
    a = math.radians(params.rotation)
    s = math.radians(params.shear)
    # rotation then shear in pixel-aspect-corrected space
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    shear = np.array([[1.0, math.tan(s)], [0.0, 1.0]])
    aspect = np.diag([width / 2.0, height / 2.0])
    linear = np.linalg.inv(aspect) @ rot @ shear @ aspect
    forward = np.eye(3)
    forward[:2, :2] = linear
    forward[:2, 2] = [2.0 * params.translate_x, 2.0 * params.translate_y]
    inverse = np.linalg.inv(forward)
    return torch.as_tensor(inverse[:2], dtype=torch.float64)


def warp(image: torch.Tensor, params: AffineParams) -> torch.Tensor:
    """Warp an (H, W, 3) or (B, 3, H, W) image with bilinear sampling and reflect fill."""
    if params.is_identity():
        return image
    channels_last = image.dim() == 3
    x = image.permute(2, 0, 1).unsqueeze(0) if channels_last else image
    theta = affine_theta(params, x.shape[-2], x.shape[-1]).to(x.dtype).unsqueeze(0).expand(x.shape[0], 2, 3)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)
    return out[0].permute(1, 2, 0) if channels_last else out


def augment_pair(pair: EditPair, augmentor: AffineAugmentor, seed: Optional[int] = None, rng=None) -> EditPair:
    """Sample one transform and apply it to both the source and the edited image."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    params = augmentor.sample(rng)
    return EditPair(
        source=warp(pair.source, params),
        edited=warp(pair.edited, params),
        text=pair.text,
    )
