"""Adaptive density control: clone, split and prune driven by positional gradients."""

import math
from typing import Dict, NamedTuple, Optional

import torch
from pydantic import BaseModel, ConfigDict, Field

from src.splatting.geometry import quat_to_rotation
from src.splatting.optimizer import SceneOptimizer
from src.splatting.renderer import GradBuffers
from src.splatting.scene import PARAMETER_NAMES, GaussianCloud
from src.utils.logger import get_logger
from src.utils.monitoring import densify_operations, gaussian_count

logger = get_logger(__name__)

SPLIT_SCALE_DIVISOR = 1.6


class DensifyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    grad_threshold: float = Field(2e-4, gt=0, description="Mean NDC positional-gradient threshold")
    percent_dense: float = Field(0.01, gt=0, description="Fraction of scene_extent separating clone and split")
    opacity_prune_threshold: float = Field(0.005, gt=0)
    split_count: int = Field(2, ge=2)
    interval_iters: int = Field(100, ge=1)
    max_gaussians: int = Field(200_000, gt=0)


class DensifyResult(NamedTuple):
    cloned: int
    split: int
    pruned: int
    skipped: bool
    count: int

    def as_dict(self) -> Dict[str, object]:
        return self._asdict()


def _sample_offsets(cloud: GaussianCloud, mask: torch.Tensor, repeats: int, generator) -> torch.Tensor:
    """Draw ``repeats`` samples from N(0, Sigma) for every selected Gaussian."""
    scales = cloud.get_scaling[mask].detach().repeat(repeats, 1)
    noise = torch.randn(scales.shape, generator=generator, dtype=torch.float64).to(scales.dtype)
    rots = quat_to_rotation(cloud._rotation[mask].detach()).repeat(repeats, 1, 1)
    return torch.bmm(rots, (scales * noise).unsqueeze(-1)).squeeze(-1)


def _rows(cloud: GaussianCloud, mask: torch.Tensor, repeats: int = 1) -> Dict[str, torch.Tensor]:
    return {name: getattr(cloud, f"_{name}").detach()[mask].repeat(repeats, 1) for name in PARAMETER_NAMES}


def _append(cloud: GaussianCloud, rows: Dict[str, torch.Tensor], optimizer: Optional[SceneOptimizer]) -> None:
    if optimizer is not None:
        optimizer.cat_tensors(rows)
        return
    cloud.replace_parameters(
        {
            name: torch.nn.Parameter(torch.cat((getattr(cloud, f"_{name}").detach(), rows[name]), dim=0))
            for name in PARAMETER_NAMES
        }
    )


def _keep(cloud: GaussianCloud, keep: torch.Tensor, optimizer: Optional[SceneOptimizer]) -> None:
    if optimizer is not None:
        optimizer.prune(keep)
        return
    cloud.replace_parameters(
        {name: torch.nn.Parameter(getattr(cloud, f"_{name}").detach()[keep]) for name in PARAMETER_NAMES}
    )


def densify_and_prune(
    cloud: GaussianCloud,
    grad_stats: GradBuffers,
    cfg: DensifyConfig,
    scene_extent: float,
    optimizer: Optional[SceneOptimizer] = None,
    generator: Optional[torch.Generator] = None,
) -> DensifyResult:
    """Clone small and split large high-gradient Gaussians, then prune transparent ones.

    New rows get zero optimizer moments; ``grad_stats`` is reset to the new size.
    """
    n = cloud.num_gaussians
    grads = grad_stats.mean_positional_gradient().to(cloud.dtype)
    with torch.no_grad():
        max_scale = cloud.get_scaling.max(dim=1).values if n else torch.zeros(0, dtype=cloud.dtype)
        selected = grads >= cfg.grad_threshold
        clone_mask = selected & (max_scale <= cfg.percent_dense * scene_extent)
        split_mask = selected & (max_scale > cfg.percent_dense * scene_extent)

        n_clone = int(clone_mask.sum())
        n_split = int(split_mask.sum())
        growth = n_clone + n_split * (cfg.split_count - 1)
        skipped = n + growth > cfg.max_gaussians
        if skipped:
            logger.warning(
                "Densification skipped: Gaussian cap reached",
                count=n, requested=growth, max_gaussians=cfg.max_gaussians,
            )
            n_clone = n_split = 0
            split_mask = torch.zeros_like(split_mask)
        else:
            if n_clone:
                clones = _rows(cloud, clone_mask)
                clones["xyz"] = clones["xyz"] + _sample_offsets(cloud, clone_mask, 1, generator)
            if n_split:
                k = cfg.split_count
                children = _rows(cloud, split_mask, k)
                children["xyz"] = children["xyz"] + _sample_offsets(cloud, split_mask, k, generator)
                children["scaling"] = children["scaling"] - math.log(SPLIT_SCALE_DIVISOR)
            if n_clone:
                _append(cloud, clones, optimizer)
            if n_split:
                _append(cloud, children, optimizer)

        total = cloud.num_gaussians
        removed = torch.zeros(total, dtype=torch.bool, device=cloud.get_xyz.device)
        removed[:n] = split_mask
        low_opacity = (cloud.get_opacity.squeeze(-1) < cfg.opacity_prune_threshold) & ~removed
        n_pruned = int(low_opacity.sum())
        keep = ~(removed | low_opacity)
        if not bool(keep.all()):
            _keep(cloud, keep, optimizer)

    grad_stats.reset(cloud.num_gaussians)

    densify_operations.labels(kind="clone").inc(n_clone)
    densify_operations.labels(kind="split").inc(n_split)
    densify_operations.labels(kind="prune").inc(n_pruned)
    gaussian_count.set(cloud.num_gaussians)

    result = DensifyResult(n_clone, n_split, n_pruned, skipped, cloud.num_gaussians)
    logger.info("Densify and prune", **result.as_dict())
    return result
