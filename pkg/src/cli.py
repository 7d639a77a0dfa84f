"""
Command-line surface.

Every command reads a JSON config (``--config``) plus ``--set key=value``
overrides, prints one JSON summary line on success and one JSON error line on
stderr on failure. Exit codes: 0 success, 1 runtime error, 2 invalid config.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from config.settings import settings
from src.data.dataset import load_dataset
from src.data.images import list_images, load_image, load_mask, save_image
from src.data.metrics import edit_locality, psnr, ssim, temporal_consistency
from src.data.synthetic import SyntheticSceneSpec, generate_synthetic, moving_blob_spec, static_spec
from src.editor.corpus import make_edit_corpus
from src.editor.editor import DiffusionEditor
from src.editor.types import EditPair, insert_v_token
from src.pipeline.events import EventLog
from src.pipeline.reconstruct import reconstruct
from src.pipeline.runner import render_frames, run_edit
from src.pipeline.schemas import (
    EditorTrainConfig,
    EvalJob,
    FinetuneConfig,
    ReconstructConfig,
    RenderJob,
    RunConfig,
    SyntheticJob,
    load_config,
)
from src.splatting.renderer import dump_contributors, render_at_time
from src.splatting.snapshot import load_snapshot, save_snapshot
from src.utils.exceptions import ConfigError, InvalidArgumentError
from src.utils.logger import LoggingContext, get_logger, setup_logging
from src.utils.monitoring import start_metrics_server

logger = get_logger(__name__)


def cmd_gen_synthetic(cfg: SyntheticJob) -> Dict[str, object]:
    if cfg.preset == "custom":
        if cfg.spec is None:
            raise ConfigError("preset 'custom' needs a spec")
        try:
            spec = SyntheticSceneSpec(**cfg.spec)
        except ValueError as e:
            raise ConfigError(f"invalid synthetic spec: {e}") from e
    elif cfg.preset == "static":
        spec = static_spec(frame_count=cfg.frame_count, size=cfg.image_size, seed=cfg.seed)
    else:
        spec = moving_blob_spec(
            frame_count=cfg.frame_count, size=cfg.image_size, layout=cfg.layout, views=cfg.views, seed=cfg.seed
        )
    scene = generate_synthetic(spec, cfg.output_dir)
    return {"output_dir": cfg.output_dir, "frames": len(scene.dataset.frames), "objects": len(spec.ellipsoids)}


def cmd_reconstruct(cfg: ReconstructConfig) -> Dict[str, object]:
    dataset = load_dataset(cfg.dataset)
    output = Path(cfg.output)
    with EventLog(output.with_suffix(".events.jsonl")) as events:
        scene = reconstruct(dataset, cfg, events)
    save_snapshot(scene, output)
    return {"output": str(output), "gaussians": scene.cloud.num_gaussians}


def cmd_train_editor(cfg: EditorTrainConfig) -> Dict[str, object]:
    corpus = make_edit_corpus(cfg.corpus_size, cfg.image_size, cfg.seed, cfg.channel, tuple(cfg.text))
    torch.manual_seed(cfg.seed)
    editor = DiffusionEditor(cfg.editor)
    editor.train_base(corpus.pairs, cfg.steps, cfg.seed)
    editor.save(cfg.output)
    return {"output": cfg.output, "steps": cfg.steps, "final_loss": editor.loss_history[-1]}


def cmd_finetune_editor(cfg: FinetuneConfig) -> Dict[str, object]:
    editor = DiffusionEditor.load(cfg.editor_checkpoint)
    dataset = load_dataset(cfg.dataset)
    source = torch.as_tensor(dataset.image(dataset.frame(cfg.keyframe_id).frame_id), dtype=torch.float32)
    edited = torch.as_tensor(load_image(cfg.edited_image), dtype=torch.float32)
    pair = EditPair(source, edited, insert_v_token(cfg.instruction)).validate()

    prior_frames = [
        torch.as_tensor(dataset.image(fid), dtype=torch.float32)
        for fid in dataset.frame_ids if fid != cfg.keyframe_id
    ] or [source]
    priors = editor.generate_prior_set(prior_frames, cfg.instruction, cfg.prior_count, cfg.seed)

    augment = editor.config.augment if cfg.augment is None else cfg.augment
    augmentor = (cfg.augmentation or editor.config.augmentation) if augment else None
    tuned = editor.finetune(pair, priors, cfg.prior_weight, augmentor, cfg.steps, cfg.seed)
    tuned.save(cfg.output)
    return {
        "output": cfg.output,
        "steps": len(tuned.loss_history),
        "final_pair_loss": tuned.loss_history[-1] if tuned.loss_history else None,
    }


def cmd_edit_scene(cfg: RunConfig) -> Dict[str, object]:
    result = run_edit(cfg)
    return {"report": str(result.report_path), "status": result.report.status, "metrics": result.report.metrics}


def cmd_render(cfg: RenderJob) -> Dict[str, object]:
    scene = load_snapshot(cfg.scene)
    dataset = load_dataset(cfg.dataset)
    frames = [dataset.frame(fid) for fid in cfg.frames] if cfg.frames else dataset.frames
    out = Path(cfg.output_dir)
    if cfg.dump_contributors:
        with torch.no_grad():
            for frame in frames:
                render = render_at_time(scene, frame.timestamp, frame.camera, cfg.background, cfg.render_workers)
                dump_contributors(render, out / "contributors" / f"{frame.frame_id}.txt")
    renders = render_frames(scene, frames, cfg.background, cfg.render_workers)
    for fid, image in renders.items():
        save_image(out / f"{fid}.png", image)
    return {"output_dir": str(out), "frames": len(renders)}


def _ordered_names(names: List[str], dataset_path: Optional[str]) -> List[List[str]]:
    """Sequences of frame names for temporal consistency: per camera by time, or one sorted run."""
    if dataset_path is None:
        return [sorted(names)]
    dataset = load_dataset(dataset_path)
    present = set(names)
    runs = []
    for camera_id in dataset.camera_ids:
        frames = sorted((f for f in dataset.frames if f.camera_id == camera_id), key=lambda f: f.timestamp)
        runs.append([f.frame_id for f in frames if f.frame_id in present])
    return [run for run in runs if run]


def cmd_eval(cfg: EvalJob) -> Dict[str, object]:
    renders = {p.stem: p for p in list_images(cfg.renders)}
    targets = {p.stem: p for p in list_images(cfg.targets)}
    names = sorted(set(renders) & set(targets))
    if not names:
        raise InvalidArgumentError("render and target directories share no PNG names")

    rows = []
    images = {}
    for name in names:
        rendered = load_image(renders[name])
        target = load_image(targets[name])
        images[name] = rendered
        row = {"frame": name, "psnr": psnr(rendered, target), "ssim": ssim(rendered, target), "edit_locality": None}
        if cfg.before is not None:
            mask_path = Path(cfg.masks) / f"{name}.png" if cfg.masks is not None else None
            mask = load_mask(mask_path) if mask_path is not None and mask_path.exists() else None
            row["edit_locality"] = edit_locality(load_image(Path(cfg.before) / f"{name}.png"), rendered, mask)
        rows.append(row)

    table = pd.DataFrame(rows, columns=["frame", "psnr", "ssim", "edit_locality"])
    consistency = float(
        np.mean([temporal_consistency([images[n] for n in run]) for run in _ordered_names(names, cfg.dataset)])
    )
    summary = {
        "frames": len(names),
        "psnr_mean": float(table["psnr"].mean()),
        "ssim_mean": float(table["ssim"].mean()),
        "temporal_consistency": consistency,
        "edit_locality_mean": None if table["edit_locality"].isna().all() else float(table["edit_locality"].mean()),
    }

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "metrics.csv", index=False)
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


COMMANDS: Dict[str, tuple] = {
    "gen-synthetic": (SyntheticJob, cmd_gen_synthetic, "Generate a synthetic dynamic scene with analytic ground truth"),
    "reconstruct": (ReconstructConfig, cmd_reconstruct, "Reconstruct a deformable Gaussian scene from a dataset"),
    "train-editor": (EditorTrainConfig, cmd_train_editor, "Train the base diffusion editor on the synthetic corpus"),
    "finetune-editor": (FinetuneConfig, cmd_finetune_editor, "Personalize an editor on one edited keyframe"),
    "edit-scene": (RunConfig, cmd_edit_scene, "Propagate a keyframe edit through a reconstructed scene"),
    "render": (RenderJob, cmd_render, "Render a scene at every dataset frame"),
    "eval": (EvalJob, cmd_eval, "Score renders against targets"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scene_editor", description="Deformable Gaussian scene edit propagation")
    parser.add_argument("--log-level", type=str, default=None, help="Override SCENE_EDITOR_LOG_LEVEL")
    parser.add_argument("--version", action="version", version=f"{settings.app_name} {settings.app_version}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, _, help_text) in COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", type=str, help="JSON config file")
        cmd.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
            help="Override a config key (dotted path); repeatable",
        )
    return parser


def _error_line(error: Exception) -> str:
    return json.dumps({"error": type(error).__name__, "message": str(error)})


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    start_metrics_server()
    schema, handler, _ = COMMANDS[args.command]

    try:
        with LoggingContext(command=args.command):
            cfg = load_config(schema, args.config, args.overrides)
            summary = handler(cfg)
    except ConfigError as e:
        print(_error_line(e), file=sys.stderr)
        return 2
    except Exception as e:
        # untyped failures still report as one JSON line
        print(_error_line(e), file=sys.stderr)
        return 1

    print(json.dumps({"command": args.command, **summary}, sort_keys=True, default=str))
    return 0
