"""
End-to-end edit propagation: load, Stage 1, Stage 2, score, persist.

The report is written whether the run succeeds or fails; library errors are
recorded in it and then re-raised for the caller.
"""

from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import torch

from config.settings import torch_dtype
from src.data.dataset import Dataset, Frame, load_dataset
from src.data.images import load_image, load_rgba, save_image
from src.data.metrics import edit_locality, psnr, temporal_consistency
from src.editor.editor import DiffusionEditor
from src.editor.oracles import DiffusionEditOracle, EditOracle, MaskRecolorOracle, OverlayOracle
from src.editor.types import insert_v_token
from src.pipeline.buffer import EditedImageBuffer
from src.pipeline.events import EventLog
from src.pipeline.report import FrameScore, RunReport, mean_or_none, write_report
from src.pipeline.schemas import OracleSpec, RunConfig
from src.pipeline.stages import STAGE1, STAGE2, StageResult, stage1_keyframe, stage2
from src.splatting.renderer import render_at_time
from src.splatting.scene import GaussianCloud, SceneSnapshot
from src.splatting.snapshot import load_snapshot, save_snapshot
from src.utils.exceptions import (
    ConfigError,
    ImageSizeMismatchError,
    InvalidArgumentError,
    KeyframeError,
    OracleError,
)
from src.utils.logger import get_logger, log_error

logger = get_logger(__name__)

REPORT_NAME = "report.json"
EVENTS_NAME = "events.jsonl"
SCENE_NAME = "scene.dgsc"


class RunResult(NamedTuple):
    scene: Optional[SceneSnapshot]
    report: RunReport
    report_path: Path


def box_region(height: int, width: int, box: Sequence[float]) -> np.ndarray:
    """Boolean mask of a (top, left, bottom, right) box given as fractions."""
    top, left, bottom, right = box
    mask = np.zeros((height, width), dtype=bool)
    mask[int(round(top * height)):int(round(bottom * height)), int(round(left * width)):int(round(right * width))] = True
    return mask


def _mask_source(spec: OracleSpec, dataset: Dataset):
    if spec.mask_source == "box":
        return box_region(dataset.height, dataset.width, spec.box)

    def from_dataset(frame_id: str) -> np.ndarray:
        mask = dataset.mask(frame_id)
        if mask is None:
            raise OracleError(f"dataset has no mask for frame {frame_id}")
        return mask

    return from_dataset


def _sprite(spec: OracleSpec) -> np.ndarray:
    sprite = spec.sprite
    if sprite.path is not None:
        return load_rgba(sprite.path)
    rgba = np.empty((sprite.size[0], sprite.size[1], 4))
    rgba[..., :3] = sprite.color
    rgba[..., 3] = sprite.alpha
    return rgba


def build_oracle(spec: OracleSpec, dataset: Dataset) -> EditOracle:
    if spec.kind == "mask_recolor":
        return MaskRecolorOracle(_mask_source(spec, dataset), spec.hue)
    if spec.kind == "overlay":
        return OverlayOracle(_sprite(spec), tuple(spec.sprite.anchor))
    editor = DiffusionEditor.load(spec.editor_checkpoint)
    return DiffusionEditOracle(
        editor,
        insert_v_token(spec.instruction) if spec.personalized else spec.instruction,
        dataset.frame_ids,
        image_guidance=spec.image_guidance,
        text_guidance=spec.text_guidance,
        steps=spec.sample_steps,
        masks=_mask_source(spec, dataset) if spec.masked_sampling else None,
    )


def cast_scene(scene: SceneSnapshot, dtype) -> SceneSnapshot:
    if scene.dtype == dtype:
        return scene
    p = {name: t.detach() for name, t in scene.cloud.parameters().items()}
    cloud = GaussianCloud.from_arrays(
        p["xyz"], p["rotation"], p["scaling"], p["opacity"], p["color"], dtype=dtype, device=scene.cloud.device
    )
    return SceneSnapshot(
        cloud=cloud,
        field=scene.field.to(dtype=dtype),
        scene_extent=scene.scene_extent,
        frame_count=scene.frame_count,
        time_scale=scene.time_scale,
        metadata=dict(scene.metadata),
    )


@torch.no_grad()
def render_frames(
    scene: SceneSnapshot, frames: Sequence[Frame], background=None, workers=None
) -> Dict[str, np.ndarray]:
    return {
        f.frame_id: render_at_time(scene, f.timestamp, f.camera, background, workers).image.cpu().numpy()
        for f in frames
    }


def sequence_consistency(dataset: Dataset, renders: Dict[str, np.ndarray]) -> float:
    """temporal_consistency per camera in timestamp order, averaged over cameras."""
    scores = []
    for camera_id in dataset.camera_ids:
        frames = sorted((f for f in dataset.frames if f.camera_id == camera_id), key=lambda f: f.timestamp)
        scores.append(temporal_consistency([renders[f.frame_id] for f in frames]))
    return float(np.mean(scores)) if scores else 1.0


def _keyframe(config: RunConfig, dataset: Dataset) -> Frame:
    frame_id = config.keyframe.frame_id
    if frame_id not in dataset.frame_ids:
        raise KeyframeError(f"keyframe {frame_id} is not a frame of the dataset")
    return dataset.frame(frame_id)


def _editable_frames(config: RunConfig, dataset: Dataset) -> List[str]:
    unknown = sorted(set(config.held_out_frames) - set(dataset.frame_ids))
    if unknown:
        raise ConfigError(f"held-out frames not in the dataset: {unknown}")
    held = set(config.held_out_frames)
    return [fid for fid in dataset.frame_ids if fid not in held]


def _keyframe_edit(config: RunConfig, dataset: Dataset, keyframe: Frame, oracle: EditOracle) -> np.ndarray:
    if config.keyframe.edited_image is not None:
        edited = load_image(config.keyframe.edited_image)
    else:
        edited = oracle.edit(dataset.image(keyframe.frame_id), keyframe.frame_id, config.seed)
    if edited.shape[:2] != (dataset.height, dataset.width):
        raise ImageSizeMismatchError(
            f"keyframe edit is {edited.shape[1]}x{edited.shape[0]}, dataset is {dataset.width}x{dataset.height}"
        )
    return np.asarray(edited, dtype=np.float64)


def _stage_summary(result: Optional[StageResult], skipped_reason: Optional[str] = None) -> dict:
    if result is None:
        return {"skipped": True, "reason": skipped_reason, "iterations": 0}
    return {
        "skipped": result.iterations == 0,
        "reason": skipped_reason,
        "iterations": result.iterations,
        "densify": result.densify,
        "edits": result.edits,
        "failures": result.failures,
        "warmup_complete_iteration": result.warmup_complete_iteration,
        "field_digest_before": result.field_digest_before,
        "field_digest_after": result.field_digest_after,
    }


def _score_frames(
    config: RunConfig,
    dataset: Dataset,
    oracle: Optional[EditOracle],
    buffer: Optional[EditedImageBuffer],
    before: Dict[str, np.ndarray],
    after: Dict[str, np.ndarray],
    keyframe_edit: Optional[np.ndarray],
) -> List[FrameScore]:
    scores = []
    held = set(config.held_out_frames)
    for frame in dataset.frames:
        fid = frame.frame_id
        original = dataset.image(fid)
        target = buffer.get(fid) if buffer is not None else None
        target = original if target is None else target.cpu().numpy()

        ground_truth = None
        region = None
        if oracle is not None:
            if keyframe_edit is not None and fid == config.keyframe.frame_id:
                ground_truth = keyframe_edit
            elif config.report_ground_truth:
                ground_truth = oracle.edit(original, fid, config.seed)
            region = oracle.region(fid, original.shape[:2])
        try:
            locality = edit_locality(before[fid], after[fid], region)
        except InvalidArgumentError:
            locality = None

        scores.append(
            FrameScore(
                frame_id=fid,
                camera_id=frame.camera_id,
                timestamp=frame.timestamp,
                held_out=fid in held,
                edit_count=buffer.entry(fid).edit_count if buffer is not None and fid in buffer else 0,
                psnr_target=psnr(after[fid], target),
                psnr_ground_truth=None if ground_truth is None else psnr(after[fid], ground_truth),
                edit_locality=locality,
            )
        )
    return scores


def _schedule_summary(config: RunConfig, schedule, layout: str) -> dict:
    return {
        "edit_period_iters": schedule.edit_period_iters,
        "stage1_iters": schedule.stage1_iters,
        "stage2_iters": schedule.stage2_iters,
        "total_iters": schedule.total_iters,
        "temporal_loss_after_warmup": schedule.temporal_loss_after_warmup,
        "lambda_dssim": config.weights.lambda_dssim,
        "lambda_temporal": config.weights.lambda_temporal,
        "temporal_kind": config.weights.temporal_kind,
        "stage2_lr_scale": config.stage2_lr_scale,
        "buffer_disabled": config.buffer_disabled,
        "pin_keyframe": config.pin_keyframe,
        "layout": layout,
    }


def _propagate(config: RunConfig, report: RunReport, events: EventLog, out: Path) -> SceneSnapshot:
    dtype = torch_dtype(config.precision)
    dataset = load_dataset(config.dataset)
    scene = cast_scene(load_snapshot(config.scene), dtype)
    schedule = config.schedule.resolved(dataset.layout)
    report.schedule = _schedule_summary(config, schedule, dataset.layout)
    bg, workers = config.background, config.render_workers
    before = render_frames(scene, dataset.frames, bg, workers)

    oracle, buffer, keyframe_edit = None, None, None
    s1 = s2 = None
    s1_reason = s2_reason = None
    if config.keyframe is None:
        s1_reason = s2_reason = "no keyframe edit configured"
        events.record("no_edit", 0, STAGE1, reason=s1_reason)
    else:
        keyframe = _keyframe(config, dataset)
        editable = _editable_frames(config, dataset)
        oracle = build_oracle(config.oracle, dataset)
        keyframe_edit = _keyframe_edit(config, dataset, keyframe, oracle)
        edited = torch.as_tensor(keyframe_edit, dtype=dtype)

        s1 = stage1_keyframe(
            scene, keyframe, edited, schedule.stage1_iters, config.densify, config.optimizer,
            config.weights, events, bg, workers, seed=config.seed,
        )
        buffer = EditedImageBuffer(keyframe.frame_id, edited, editable, iteration=schedule.stage1_iters)
        if schedule.stage2_iters > 0:
            s2 = stage2(
                scene, oracle, dataset, buffer, schedule.stage2_iters, schedule.edit_period_iters,
                config.weights, config.optimizer,
                lr_scale=config.stage2_lr_scale,
                temporal_after_warmup=schedule.temporal_loss_after_warmup,
                buffer_disabled=config.buffer_disabled,
                pin_keyframe=config.pin_keyframe,
                train_color=config.train_color,
                events=events, background=bg, workers=workers,
                seed=config.seed, iteration_offset=schedule.stage1_iters,
            )
        else:
            s2_reason = "total_iters equals stage1_iters"
            events.record("stage_skipped", schedule.stage1_iters, STAGE2, reason=s2_reason)

    report.stages = {STAGE1: _stage_summary(s1, s1_reason), STAGE2: _stage_summary(s2, s2_reason)}
    for result in (s1, s2):
        if result is not None:
            report.loss_curve.extend(result.loss_curve)
            report.gaussian_counts.extend(result.gaussian_counts)
    report.buffer_timeline = list(buffer.timeline) if buffer is not None else []

    after = render_frames(scene, dataset.frames, bg, workers)
    report.frames = _score_frames(config, dataset, oracle, buffer, before, after, keyframe_edit)
    report.metrics = {
        "mean_psnr_target": mean_or_none([f.psnr_target for f in report.frames]),
        "mean_psnr_ground_truth": mean_or_none([f.psnr_ground_truth for f in report.frames]),
        "held_out_psnr_ground_truth": mean_or_none([f.psnr_ground_truth for f in report.frames if f.held_out]),
        "temporal_consistency": sequence_consistency(dataset, after),
        "edit_locality": mean_or_none([f.edit_locality for f in report.frames]),
        "gaussians": float(scene.cloud.num_gaussians),
    }

    save_snapshot(scene, out / SCENE_NAME)
    if config.save_renders:
        for fid, image in after.items():
            save_image(out / "renders" / f"{fid}.png", image)
            save_image(out / "renders_before" / f"{fid}.png", before[fid])
    return scene


def run_edit(config: RunConfig) -> RunResult:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = RunReport(config=config.model_dump())
    report_path = out / REPORT_NAME
    events = EventLog(out / EVENTS_NAME)

    try:
        scene = _propagate(config, report, events, out)
        report.status = "ok"
        logger.info("Edit run finished", output_dir=str(out), metrics=report.metrics)
    except Exception as e:
        report.status = "failed"
        report.error = {"type": type(e).__name__, "message": str(e)}
        events.record("run_failed", 0, "run", error=type(e).__name__, message=str(e))
        log_error(e, {"output_dir": str(out)})
        raise
    finally:
        write_report(report, report_path)
        events.close()

    return RunResult(scene, report, report_path)
