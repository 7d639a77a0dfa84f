"""
Photometric and temporal training losses.

Every loss is a differentiable torch function on (H, W, 3) images;
``with_grad`` turns any of them into (value, image gradients) for callers
that drive the rasterizer backward themselves.
"""

from typing import Callable, Literal, NamedTuple, Optional, Tuple

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from config.settings import ScheduleDefaults
from src.utils.exceptions import InvalidArgumentError, ShapeMismatchError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambda_dssim: float = Field(ScheduleDefaults.LAMBDA_DSSIM, ge=0.0, le=1.0, description="D-SSIM mix weight")
    lambda_temporal: float = Field(ScheduleDefaults.LAMBDA_TEMPORAL, ge=0.0, description="Temporal weight")
    temporal_kind: Literal["l1", "l2"] = "l1"


class LossBreakdown(NamedTuple):
    total: torch.Tensor
    l1: float
    dssim: float
    temporal: float


class LossResult(NamedTuple):
    value: float
    grads: Tuple[torch.Tensor, ...]


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_shapes(rendered, target)
    return torch.abs(rendered - target).mean()


def _gaussian_window(dtype, device) -> torch.Tensor:
    coords = torch.arange(SSIM_WINDOW, dtype=dtype, device=device) - SSIM_WINDOW // 2
    g = torch.exp(-(coords ** 2) / (2 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    window = torch.outer(g, g)
    return window.expand(3, 1, SSIM_WINDOW, SSIM_WINDOW).contiguous()


def _filter(x: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    pad = SSIM_WINDOW // 2
    return F.conv2d(F.pad(x, (pad, pad, pad, pad), mode="reflect"), window, groups=3)


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM over pixels and channels (dynamic range 1)."""
    _check_shapes(a, b)
    if a.dim() != 3 or a.shape[-1] != 3:
        raise ShapeMismatchError("images must be (H, W, 3)")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise InvalidArgumentError(f"image {tuple(a.shape[:2])} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")

    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)
    window = _gaussian_window(x.dtype, x.device)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2

    mu_x, mu_y = _filter(x, window), _filter(y, window)
    sigma_x = _filter(x * x, window) - mu_x * mu_x
    sigma_y = _filter(y * y, window) - mu_y * mu_y
    sigma_xy = _filter(x * y, window) - mu_x * mu_y

    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
    )
    return ssim_map.mean(dim=(0, 2, 3)).mean()


def dssim_loss(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (1 - ssim(rendered, target)) / 2


def temporal_loss(render_a: torch.Tensor, render_b: torch.Tensor, kind: str = "l1") -> torch.Tensor:
    """Difference between renders at adjacent timestamps; both sides receive gradients."""
    _check_shapes(render_a, render_b)
    diff = render_a - render_b
    if kind == "l1":
        return torch.abs(diff).mean()
    if kind == "l2":
        return (diff * diff).mean()
    raise InvalidArgumentError(f"unknown temporal loss kind {kind!r}")


def combine_losses(l1, dssim_value, temporal, weights: LossWeights):
    """(1 - lambda_d) L1 + lambda_d D-SSIM + lambda_t L_temp; ``temporal=None`` drops the last term."""
    total = (1 - weights.lambda_dssim) * l1 + weights.lambda_dssim * dssim_value
    if temporal is not None:
        total = total + weights.lambda_temporal * temporal
    return total


def total_loss(
    rendered: torch.Tensor,
    target: torch.Tensor,
    render_adjacent: Optional[torch.Tensor] = None,
    weights: Optional[LossWeights] = None,
) -> LossBreakdown:
    weights = weights or LossWeights()
    l1 = l1_loss(rendered, target)
    d = dssim_loss(rendered, target) if weights.lambda_dssim > 0 else torch.zeros((), dtype=rendered.dtype)
    temporal = None
    if render_adjacent is not None:
        temporal = temporal_loss(rendered, render_adjacent, weights.temporal_kind)
    total = combine_losses(l1, d, temporal, weights)
    return LossBreakdown(
        total=total,
        l1=float(l1.detach()),
        dssim=float(d.detach()),
        temporal=float(temporal.detach()) if temporal is not None else 0.0,
    )


def with_grad(loss_fn: Callable[..., torch.Tensor], *images: torch.Tensor, **kwargs) -> LossResult:
    """Evaluate ``loss_fn`` and return its value with gradients for every image argument."""
    leaves = [img.detach().clone().requires_grad_(True) for img in images]
    value = loss_fn(*leaves, **kwargs)
    if isinstance(value, LossBreakdown):
        value = value.total
    grads = torch.autograd.grad(value, leaves, allow_unused=True)
    grads = tuple(torch.zeros_like(leaf) if g is None else g for leaf, g in zip(leaves, grads))
    return LossResult(float(value.detach()), grads)
