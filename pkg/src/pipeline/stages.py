"""
The two optimization stages of edit propagation.

Stage 1 fits the canonical Gaussians to the edited keyframe with the
deformation field frozen, densifying on an interval. Stage 2 trains Gaussians
and field jointly on the edited-image buffer while an oracle fills it one
frame per edit tick.
"""

import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from src.data.dataset import Dataset, Frame
from src.editor.oracles import EditOracle
from src.pipeline.buffer import EditedImageBuffer
from src.pipeline.events import EventLog
from src.pipeline.trainer import SceneTrainer
from src.splatting.densify import DensifyConfig, densify_and_prune
from src.splatting.losses import LossWeights
from src.splatting.optimizer import OptimizerConfig, SceneOptimizer
from src.splatting.scene import SceneSnapshot, parameter_digest
from src.utils.exceptions import OracleError, SceneEditorError
from src.utils.logger import get_logger
from src.utils.monitoring import edit_count, gaussian_count

logger = get_logger(__name__)

STAGE1 = "stage1"
STAGE2 = "stage2"


@dataclass
class StageResult:
    iterations: int = 0
    loss_curve: List[dict] = field(default_factory=list)
    gaussian_counts: List[dict] = field(default_factory=list)
    densify: List[dict] = field(default_factory=list)
    field_digest_before: str = ""
    field_digest_after: str = ""
    edits: List[dict] = field(default_factory=list)
    failures: List[dict] = field(default_factory=list)
    warmup_complete_iteration: Optional[int] = None


def _as_tensor(image, dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(image), dtype=dtype)


def stage1_keyframe(
    scene: SceneSnapshot,
    keyframe: Frame,
    edited: torch.Tensor,
    iters: int,
    densify_cfg: DensifyConfig,
    optimizer_cfg: Optional[OptimizerConfig] = None,
    weights: Optional[LossWeights] = None,
    events: Optional[EventLog] = None,
    background: Optional[Sequence[float]] = None,
    workers: Optional[int] = None,
    seed: int = 0,
    iteration_offset: int = 0,
) -> StageResult:
    """Fit the canonical Gaussians to the edited keyframe; the field stays bit-identical."""
    events = events or EventLog()
    weights = (weights or LossWeights()).model_copy(update={"lambda_temporal": 0.0})
    result = StageResult(field_digest_before=parameter_digest(scene.field))
    result.gaussian_counts.append({"iteration": iteration_offset, "count": scene.cloud.num_gaussians})
    events.record("stage_start", iteration_offset, STAGE1, iters=iters, keyframe=keyframe.frame_id)
    started = time.perf_counter()

    optimizer = SceneOptimizer(
        scene.cloud, scene.field, optimizer_cfg, scene.scene_extent, train_field=False
    )
    trainer = SceneTrainer(scene, optimizer, weights, STAGE1, background, workers, track_gradients=True)
    generator = torch.Generator().manual_seed(seed)
    target = edited.to(scene.dtype)

    for i in range(1, iters + 1):
        iteration = iteration_offset + i
        step = trainer.step(iteration, keyframe, target)
        result.loss_curve.append(step.as_record(STAGE1))
        if i % densify_cfg.interval_iters == 0:
            outcome = densify_and_prune(
                scene.cloud, trainer.grad_stats, densify_cfg, scene.scene_extent, optimizer, generator
            )
            result.densify.append({"iteration": iteration, **outcome.as_dict()})
            result.gaussian_counts.append({"iteration": iteration, "count": outcome.count})
            events.record("densify", iteration, STAGE1, **outcome.as_dict())

    scene.field.requires_grad_(True)
    result.iterations = iters
    result.field_digest_after = parameter_digest(scene.field)
    if result.field_digest_after != result.field_digest_before:
        raise SceneEditorError("deformation field changed during stage 1")
    events.record(
        "stage_end", iteration_offset + iters, STAGE1,
        iters=iters, gaussians=scene.cloud.num_gaussians, field_digest=result.field_digest_after,
        seconds=round(time.perf_counter() - started, 3),
    )
    logger.info("Stage 1 finished", iters=iters, gaussians=scene.cloud.num_gaussians)
    return result


class EditQueue:
    """Runs oracle edits on one worker thread.

    A request is submitted right after the tick that decides it and is
    consumed at the following tick, so the buffer only changes at
    deterministic iterations.
    """

    def __init__(self, oracle: EditOracle):
        self.oracle = oracle
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="edit-oracle")
        self.pending: Optional[Dict[str, object]] = None

    def submit(self, frame_id: str, image: np.ndarray, seed: int) -> None:
        future: Future = self._executor.submit(self.oracle.edit, image, frame_id, seed)
        self.pending = {"frame_id": frame_id, "seed": seed, "future": future}

    def take(self):
        """(frame_id, seed, edited image) of the pending request; raises OracleError on failure."""
        request, self.pending = self.pending, None
        if request is None:
            return None
        try:
            edited = request["future"].result()
        except Exception as e:
            raise OracleError(f"oracle failed on frame {request['frame_id']}: {e}") from e
        edited = np.asarray(edited, dtype=np.float64)
        if not np.all(np.isfinite(edited)) or edited.min() < 0 or edited.max() > 1:
            raise OracleError(f"oracle returned invalid pixels for frame {request['frame_id']}")
        return request["frame_id"], request["seed"], edited

    def close(self) -> None:
        self._executor.shutdown(wait=True)


def _choose_edit(
    buffer: EditedImageBuffer, rng: np.random.Generator, pin_keyframe: bool, retry: Optional[str]
) -> Optional[str]:
    """Next frame to edit: a pending retry, else an unedited frame, else any (Iterative DU)."""
    if retry is not None:
        return retry
    candidates = buffer.unedited()
    if not candidates:
        candidates = [f for f in buffer.frame_ids if not (pin_keyframe and f == buffer.keyframe_id)]
    if not candidates:
        return None
    return candidates[int(rng.integers(len(candidates)))]


def stage2(
    scene: SceneSnapshot,
    oracle: EditOracle,
    dataset: Dataset,
    buffer: EditedImageBuffer,
    iters: int,
    edit_period: int,
    weights: LossWeights,
    optimizer_cfg: Optional[OptimizerConfig] = None,
    lr_scale: float = 0.5,
    temporal_after_warmup: bool = True,
    buffer_disabled: bool = False,
    pin_keyframe: bool = True,
    train_color: bool = True,
    events: Optional[EventLog] = None,
    background: Optional[Sequence[float]] = None,
    workers: Optional[int] = None,
    seed: int = 0,
    iteration_offset: int = 0,
    on_step: Optional[Callable] = None,
) -> StageResult:
    """Joint training on buffered edits with periodic oracle edits.

    Edit ticks fall on stage iterations that are multiples of ``edit_period``.
    During warm-up only buffered frames are trained on; with
    ``buffer_disabled`` every editable frame is, using its original image
    until an edit arrives.
    """
    events = events or EventLog()
    result = StageResult()
    rng = np.random.default_rng(seed)
    dtype = scene.dtype
    originals = {fid: _as_tensor(dataset.image(fid), dtype) for fid in buffer.frame_ids}

    optimizer = SceneOptimizer(
        scene.cloud, scene.field, optimizer_cfg, scene.scene_extent,
        lr_scale=lr_scale, train_field=True, train_color=train_color,
    )
    trainer = SceneTrainer(scene, optimizer, weights, STAGE2, background, workers)
    queue = EditQueue(oracle)
    events.record(
        "stage_start", iteration_offset, STAGE2,
        iters=iters, buffered=buffer.keys(), buffer_disabled=buffer_disabled,
    )
    started = time.perf_counter()
    if buffer.warmup_over:
        result.warmup_complete_iteration = iteration_offset
        events.record("warmup_complete", iteration_offset, STAGE2, buffered=len(buffer))

    tick = 0
    retry = None

    def schedule_next():
        frame_id = _choose_edit(buffer, rng, pin_keyframe, retry)
        if frame_id is not None:
            queue.submit(frame_id, dataset.image(frame_id), seed + tick)

    try:
        if iters >= edit_period:
            schedule_next()
        for i in range(1, iters + 1):
            iteration = iteration_offset + i
            if i % edit_period == 0:
                tick += 1
                retry = _apply_tick(queue, buffer, result, events, iteration, i, dtype)
                if buffer.warmup_over and result.warmup_complete_iteration is None:
                    result.warmup_complete_iteration = iteration
                    events.record("warmup_complete", iteration, STAGE2, buffered=len(buffer))
                if i + edit_period <= iters:
                    schedule_next()

            if buffer_disabled:
                frame_id = buffer.frame_ids[int(rng.integers(len(buffer.frame_ids)))]
                target = buffer.get(frame_id)
                if target is None:
                    target = originals[frame_id]
            else:
                keys = buffer.keys()
                frame_id = keys[int(rng.integers(len(keys)))]
                target = buffer.get(frame_id)

            frame = dataset.frame(frame_id)
            adjacent = None
            if temporal_after_warmup and buffer.warmup_over and weights.lambda_temporal > 0:
                adjacent = dataset.adjacent_frame(frame_id)
            step = trainer.step(iteration, frame, target, adjacent)
            result.loss_curve.append(step.as_record(STAGE2))
            if on_step is not None:
                on_step(step, buffer)
    finally:
        queue.close()

    result.iterations = iters
    result.gaussian_counts.append({"iteration": iteration_offset + iters, "count": scene.cloud.num_gaussians})
    gaussian_count.set(scene.cloud.num_gaussians)
    events.record(
        "stage_end", iteration_offset + iters, STAGE2,
        iters=iters, edits=len(result.edits), failures=len(result.failures),
        warmup_complete_iteration=result.warmup_complete_iteration,
        seconds=round(time.perf_counter() - started, 3),
    )
    logger.info(
        "Stage 2 finished",
        iters=iters, edits=len(result.edits), failures=len(result.failures),
        warmup_complete_iteration=result.warmup_complete_iteration,
    )
    return result


def _apply_tick(
    queue: EditQueue,
    buffer: EditedImageBuffer,
    result: StageResult,
    events: EventLog,
    iteration: int,
    stage_iteration: int,
    dtype,
) -> Optional[str]:
    """Consume the pending edit; returns the frame to retry when the oracle failed."""
    if queue.pending is None:
        edit_count.labels(outcome="idle").inc()
        events.record("edit_idle", iteration, STAGE2, stage_iteration=stage_iteration)
        return None
    frame_id = queue.pending["frame_id"]
    warmup = not buffer.warmup_over
    try:
        _, seed, edited = queue.take()
    except OracleError as e:
        edit_count.labels(outcome="failed").inc()
        failure = {"iteration": iteration, "frame_id": frame_id, "error": str(e)}
        result.failures.append(failure)
        events.record("edit_failed", iteration, STAGE2, stage_iteration=stage_iteration, frame_id=frame_id, error=str(e))
        logger.warning("Oracle edit failed, retrying next tick", frame_id=frame_id, iteration=iteration, error=str(e))
        return frame_id

    entry = buffer.insert(frame_id, _as_tensor(edited, dtype), iteration)
    edit_count.labels(outcome="ok").inc()
    record = {
        "iteration": iteration,
        "frame_id": frame_id,
        "edit_count": entry.edit_count,
        "warmup": warmup,
        "buffer_size": len(buffer),
        "seed": seed,
    }
    result.edits.append(record)
    events.record("edit", iteration, STAGE2, stage_iteration=stage_iteration, **{k: v for k, v in record.items() if k != "iteration"})
    return None
