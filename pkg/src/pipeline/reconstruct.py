"""
Reconstruction of a dynamic scene from a dataset.

A canonical warm-up trains the Gaussians alone (the deformation field is
zero-initialized and frozen) with densification; the joint phase then trains
Gaussians and field together without densification.
"""

import time
from typing import List, Optional, Sequence

import numpy as np
import torch

from config.settings import torch_dtype
from src.data.dataset import Dataset
from src.pipeline.events import EventLog
from src.pipeline.schemas import ReconstructConfig
from src.pipeline.trainer import SceneTrainer
from src.splatting.densify import densify_and_prune
from src.splatting.geometry import Camera
from src.splatting.optimizer import SceneOptimizer
from src.splatting.scene import DeformationField, GaussianCloud, SceneSnapshot, scene_extent_from_cameras
from src.utils.exceptions import DegenerateDatasetError
from src.utils.logger import get_logger

logger = get_logger(__name__)

STAGE_CANONICAL = "canonical"
STAGE_JOINT = "joint"


def look_at_center(cameras: Sequence[Camera]) -> np.ndarray:
    """Least-squares point closest to every camera's optical axis."""
    lhs = np.zeros((3, 3))
    rhs = np.zeros(3)
    for cam in cameras:
        rot = np.asarray(cam.world_to_camera)[:, :3]
        axis = rot[2]
        proj = np.eye(3) - np.outer(axis, axis)
        lhs += proj
        rhs += proj @ cam.center()
    # parallel axes leave lhs singular; fall back toward one unit in front of the rig
    anchor = np.mean([cam.center() + np.asarray(cam.world_to_camera)[2, :3] for cam in cameras], axis=0)
    eps = 1e-6 * len(cameras)
    return np.linalg.solve(lhs + eps * np.eye(3), rhs + eps * anchor)


def initial_cloud(dataset: Dataset, cfg: ReconstructConfig, generator: torch.Generator, dtype) -> GaussianCloud:
    cameras = [f.camera for f in dataset.frames]
    center = look_at_center(cameras)
    extent = cfg.init_extent
    if extent is None:
        extent = 0.35 * float(np.mean([np.linalg.norm(cam.center() - center) for cam in cameras]))
    return GaussianCloud.create_random(
        cfg.init_points, extent=extent, center=tuple(center), init_opacity=cfg.init_opacity,
        generator=generator, dtype=dtype,
    )


def check_reconstructable(dataset: Dataset) -> None:
    if not dataset.frames:
        raise DegenerateDatasetError("dataset has no frames")
    if len(dataset.timestamps) < 2:
        raise DegenerateDatasetError("reconstruction needs at least two timestamps")


def reconstruct(
    dataset: Dataset,
    cfg: ReconstructConfig,
    events: Optional[EventLog] = None,
) -> SceneSnapshot:
    check_reconstructable(dataset)
    events = events or EventLog()
    dtype = torch_dtype(cfg.precision)
    generator = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)

    cloud = initial_cloud(dataset, cfg, generator, dtype)
    field = DeformationField(
        depth=cfg.deformation_depth,
        width=cfg.deformation_width,
        position_freqs=cfg.position_freqs,
        time_freqs=cfg.time_freqs,
    ).to(dtype=dtype)
    scene = SceneSnapshot(
        cloud=cloud,
        field=field,
        scene_extent=scene_extent_from_cameras([f.camera for f in dataset.frames]),
        frame_count=len(dataset.frames),
        metadata={"layout": dataset.layout, "iters": cfg.iters, "seed": cfg.seed},
    )
    targets = {f.frame_id: torch.as_tensor(dataset.image(f.frame_id), dtype=dtype) for f in dataset.frames}

    optimizer = SceneOptimizer(cloud, field, cfg.optimizer, scene.scene_extent)
    # canonical phase: field parameters receive no gradients, so Adam leaves them alone
    field.requires_grad_(False)
    trainer = SceneTrainer(
        scene, optimizer, cfg.weights, STAGE_CANONICAL, cfg.background, cfg.render_workers, track_gradients=True
    )
    events.record("stage_start", 0, STAGE_CANONICAL, iters=cfg.warmup_iters, gaussians=cloud.num_gaussians)
    logger.info(
        "Reconstruction started",
        frames=len(dataset.frames), gaussians=cloud.num_gaussians, scene_extent=scene.scene_extent,
    )

    started = time.perf_counter()
    losses: List[float] = []
    for iteration in range(1, cfg.iters + 1):
        if iteration == cfg.warmup_iters + 1:
            field.requires_grad_(True)
            trainer.stage = STAGE_JOINT
            trainer.grad_stats = None
            events.record("stage_start", iteration, STAGE_JOINT, iters=cfg.iters - cfg.warmup_iters,
                          gaussians=scene.cloud.num_gaussians)

        frame = dataset.frames[int(rng.integers(len(dataset.frames)))]
        step = trainer.step(iteration, frame, targets[frame.frame_id])
        losses.append(float(step.losses.total.detach()))

        if trainer.grad_stats is not None and iteration % cfg.densify.interval_iters == 0:
            outcome = densify_and_prune(
                scene.cloud, trainer.grad_stats, cfg.densify, scene.scene_extent, optimizer, generator
            )
            events.record("densify", iteration, STAGE_CANONICAL, **outcome.as_dict())

    field.requires_grad_(True)
    events.record("stage_end", cfg.iters, trainer.stage, gaussians=scene.cloud.num_gaussians,
                  final_loss=losses[-1] if losses else None,
                  seconds=round(time.perf_counter() - started, 3))
    logger.info("Reconstruction finished", gaussians=scene.cloud.num_gaussians, final_loss=losses[-1])
    scene.metadata["final_loss"] = losses[-1]
    return scene
