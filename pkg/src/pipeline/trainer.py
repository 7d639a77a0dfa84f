"""One optimization step: render, loss, backward, gradient statistics, Adam."""

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from src.data.dataset import Frame
from src.splatting.losses import LossBreakdown, LossWeights, total_loss
from src.splatting.optimizer import SceneOptimizer
from src.splatting.renderer import GradBuffers, RenderOutput, render_at_time
from src.splatting.scene import SceneSnapshot
from src.utils.logger import get_logger
from src.utils.monitoring import training_iterations

logger = get_logger(__name__)


@dataclass
class StepResult:
    iteration: int
    frame_id: str
    losses: LossBreakdown
    temporal_active: bool
    render: RenderOutput

    def as_record(self, stage: str) -> dict:
        return {
            "iteration": self.iteration,
            "stage": stage,
            "frame_id": self.frame_id,
            "total": float(self.losses.total.detach()),
            "l1": self.losses.l1,
            "dssim": self.losses.dssim,
            "temporal": self.losses.temporal,
            "temporal_active": self.temporal_active,
        }


class SceneTrainer:
    """Owns the single-writer training loop state for one stage."""

    def __init__(
        self,
        scene: SceneSnapshot,
        optimizer: SceneOptimizer,
        weights: LossWeights,
        stage: str,
        background: Optional[Sequence[float]] = None,
        workers: Optional[int] = None,
        track_gradients: bool = False,
    ):
        self.scene = scene
        self.optimizer = optimizer
        self.weights = weights
        self.stage = stage
        self.background = background
        self.workers = workers
        self.grad_stats = (
            GradBuffers.zeros(scene.cloud.num_gaussians, scene.dtype) if track_gradients else None
        )

    def render(self, frame: Frame) -> RenderOutput:
        return render_at_time(self.scene, frame.timestamp, frame.camera, self.background, self.workers)

    def step(
        self,
        iteration: int,
        frame: Frame,
        target: torch.Tensor,
        adjacent: Optional[Frame] = None,
    ) -> StepResult:
        """Train on ``target`` at ``frame``; ``adjacent`` adds the temporal term."""
        self.optimizer.update_learning_rate(iteration)
        self.optimizer.zero_grad()
        render = self.render(frame)
        render_adjacent = self.render(adjacent).image if adjacent is not None else None
        target = target.to(dtype=render.image.dtype)
        losses = total_loss(render.image, target, render_adjacent, self.weights)
        losses.total.backward()

        if self.grad_stats is not None and render.means2d.grad is not None:
            self.grad_stats.accumulate(render.means2d.grad, render.visible, frame.camera.width, frame.camera.height)
        self.optimizer.step()
        training_iterations.labels(stage=self.stage).inc()

        logger.debug(
            "Training step",
            stage=self.stage,
            iteration=iteration,
            frame_id=frame.frame_id,
            loss=float(losses.total.detach()),
        )
        return StepResult(iteration, frame.frame_id, losses, render_adjacent is not None, render)
