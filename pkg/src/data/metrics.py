"""Evaluation metrics over float images in [0, 1]."""

from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from src.splatting.losses import ssim as ssim_tensor
from src.utils.exceptions import InvalidArgumentError, ShapeMismatchError

PSNR_CAP = 99.0
LUMA = (0.299, 0.587, 0.114)
POOL = 4


def _as_array(image) -> np.ndarray:
    if torch.is_tensor(image):
        image = image.detach().cpu().numpy()
    return np.asarray(image, dtype=np.float64)


def _pair(a, b):
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB; identical images report ``PSNR_CAP``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(a, b) -> float:
    a, b = _pair(a, b)
    return float(ssim_tensor(torch.from_numpy(a), torch.from_numpy(b)))


def pooled_luma(image) -> np.ndarray:
    """Luma averaged over non-overlapping 4x4 blocks (trailing partial blocks dropped).

    Frames smaller than a block are pooled over their full extent on that axis.
    """
    image = _as_array(image)
    if image.ndim != 3 or min(image.shape[:2]) == 0:
        raise InvalidArgumentError(f"expected a non-empty (H, W, 3) image, got shape {image.shape}")
    luma = torch.from_numpy(image @ np.asarray(LUMA))[None, None]
    kernel = (min(POOL, image.shape[0]), min(POOL, image.shape[1]))
    return F.avg_pool2d(luma, kernel).squeeze(0).squeeze(0).numpy()


def temporal_consistency(renders: Sequence) -> float:
    """Mean over adjacent pairs of 1 - mean |pooled luma difference|; 1.0 for fewer than two frames."""
    if len(renders) < 2:
        return 1.0
    pooled = [pooled_luma(r) for r in renders]
    if any(p.shape != pooled[0].shape for p in pooled):
        raise ShapeMismatchError("renders differ in size")
    scores = [1.0 - float(np.mean(np.abs(a - b))) for a, b in zip(pooled, pooled[1:])]
    return float(np.mean(scores))


def edit_locality(before, after, mask: Optional[np.ndarray] = None) -> float:
    """Mean absolute change outside ``mask``; an empty or missing mask covers nothing."""
    before, after = _pair(before, after)
    if mask is None:
        return float(np.mean(np.abs(after - before)))
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != before.shape[:2]:
        raise ShapeMismatchError(f"mask shape {mask.shape} does not match image {before.shape[:2]}")
    outside = ~mask
    if not outside.any():
        raise InvalidArgumentError("mask covers the whole image; nothing to measure")
    return float(np.mean(np.abs(after - before)[outside]))
