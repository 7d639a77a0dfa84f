import json

import numpy as np
import pandas as pd
import pytest

from src import cli
from src.cli import main
from src.data.dataset import load_dataset
from src.data.images import save_image, save_mask
from src.editor.editor import DiffusionEditor
from src.editor.oracles import mask_recolor


def _last_json(text):
    return json.loads([line for line in text.splitlines() if line.strip()][-1])


def _run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured


@pytest.fixture
def dataset_dir(tmp_path, capsys):
    out = tmp_path / "blob"
    code, captured = _run(
        capsys, "gen-synthetic",
        "--set", f"output_dir={out}", "--set", "image_size=16", "--set", "frame_count=4",
    )
    assert code == 0
    summary = _last_json(captured.out)
    assert summary == {"command": "gen-synthetic", "output_dir": str(out), "frames": 4, "objects": 2}
    return out


@pytest.fixture
def scene_path(tmp_path, dataset_dir, capsys):
    config = tmp_path / "reconstruct.json"
    config.write_text(json.dumps({
        "dataset": str(dataset_dir),
        "output": str(tmp_path / "scene.dgsc"),
        "iters": 6, "warmup_iters": 3, "init_points": 30,
        "deformation_depth": 1, "deformation_width": 8, "position_freqs": 1, "time_freqs": 1,
        "densify": {"interval_iters": 3},
    }))
    code, captured = _run(capsys, "reconstruct", "--config", str(config))
    assert code == 0
    summary = _last_json(captured.out)
    assert summary["command"] == "reconstruct" and summary["gaussians"] > 0
    assert (tmp_path / "scene.events.jsonl").exists()
    return tmp_path / "scene.dgsc"


def test_gen_synthetic_writes_a_dataset(dataset_dir):
    dataset = load_dataset(dataset_dir)
    assert dataset.frame_ids == ["0000", "0001", "0002", "0003"]
    assert (dataset.width, dataset.height) == (16, 16)


def test_render_with_contributors(tmp_path, dataset_dir, scene_path, capsys):
    out = tmp_path / "renders"
    code, captured = _run(
        capsys, "render",
        "--set", f"scene={scene_path}", "--set", f"dataset={dataset_dir}", "--set", f"output_dir={out}",
        "--set", 'frames=["0001"]', "--set", "dump_contributors=true",
    )
    assert code == 0
    assert _last_json(captured.out)["frames"] == 1
    assert (out / "0001.png").exists()
    header = (out / "contributors" / "0001.txt").read_text().splitlines()[0]
    assert header == "# contributors v1 width=16 height=16"


def test_edit_scene(tmp_path, dataset_dir, scene_path, capsys):
    out = tmp_path / "edit"
    config = tmp_path / "run.json"
    config.write_text(json.dumps({
        "dataset": str(dataset_dir),
        "scene": str(scene_path),
        "output_dir": str(out),
        "keyframe": {"frame_id": "0000"},
        "oracle": {"kind": "mask_recolor"},
        "schedule": {"edit_period_iters": 2, "stage1_iters": 2, "total_iters": 8},
    }))
    code, captured = _run(capsys, "edit-scene", "--config", str(config), "--set", "save_renders=false")
    assert code == 0
    summary = _last_json(captured.out)
    assert summary["status"] == "ok"
    assert summary["report"] == str(out / "report.json")
    assert set(summary["metrics"]) >= {"mean_psnr_target", "temporal_consistency", "gaussians"}


def test_eval_identical_directories(tmp_path, dataset_dir, capsys):
    images = dataset_dir / "images"
    out = tmp_path / "eval"
    code, captured = _run(
        capsys, "eval",
        "--set", f"renders={images}", "--set", f"targets={images}", "--set", f"output_dir={out}",
        "--set", f"dataset={dataset_dir}",
    )
    assert code == 0
    summary = _last_json(captured.out)
    assert summary["frames"] == 4
    assert summary["psnr_mean"] == 99.0
    assert summary["ssim_mean"] == pytest.approx(1.0)
    assert summary["edit_locality_mean"] is None
    table = pd.read_csv(out / "metrics.csv", dtype={"frame": str})
    assert list(table["frame"]) == ["0000", "0001", "0002", "0003"]
    assert json.loads((out / "metrics.json").read_text())["frames"] == 4


def test_eval_edit_locality(tmp_path, dataset_dir, capsys):
    dataset = load_dataset(dataset_dir)
    edited = tmp_path / "edited"
    masks = tmp_path / "masks"
    for fid in dataset.frame_ids:
        mask = dataset.mask(fid)
        save_image(edited / f"{fid}.png", mask_recolor(dataset.image(fid), mask, 120.0))
        save_mask(masks / f"{fid}.png", mask)
    code, captured = _run(
        capsys, "eval",
        "--set", f"renders={edited}", "--set", f"targets={edited}", "--set", f"output_dir={tmp_path / 'eval'}",
        "--set", f"before={dataset_dir / 'images'}", "--set", f"masks={masks}",
    )
    assert code == 0
    assert _last_json(captured.out)["edit_locality_mean"] == pytest.approx(0.0, abs=1e-12)


def test_eval_without_shared_frames(tmp_path, dataset_dir, capsys):
    other = tmp_path / "other"
    save_image(other / "zzz.png", np.zeros((16, 16, 3)))
    code, captured = _run(
        capsys, "eval",
        "--set", f"renders={dataset_dir / 'images'}", "--set", f"targets={other}",
        "--set", f"output_dir={tmp_path / 'eval'}",
    )
    assert code == 1
    error = _last_json(captured.err)
    assert error["error"] == "InvalidArgumentError"


def test_invalid_config_exits_2(tmp_path, capsys):
    code, captured = _run(capsys, "reconstruct", "--set", "dataset=x")
    assert code == 2
    error = _last_json(captured.err)
    assert error["error"] == "ConfigError"
    assert "ReconstructConfig" in error["message"]
    assert captured.out == ""


def test_missing_config_file_exits_2(tmp_path, capsys):
    code, captured = _run(capsys, "edit-scene", "--config", str(tmp_path / "nope.json"))
    assert code == 2
    assert _last_json(captured.err)["error"] == "ConfigError"


def test_missing_dataset_exits_1(tmp_path, capsys):
    code, captured = _run(
        capsys, "reconstruct", "--set", f"dataset={tmp_path / 'none'}", "--set", f"output={tmp_path / 's.dgsc'}",
    )
    assert code == 1
    assert _last_json(captured.err)["error"] == "ManifestMissingError"


def test_render_missing_scene_exits_1(tmp_path, dataset_dir, capsys):
    code, captured = _run(
        capsys, "render",
        "--set", f"scene={tmp_path / 'nope.dgsc'}", "--set", f"dataset={dataset_dir}",
        "--set", f"output_dir={tmp_path / 'renders'}",
    )
    assert code == 1
    error = _last_json(captured.err)
    assert error["error"] == "SnapshotMissingError"
    assert "nope.dgsc" in error["message"]
    assert captured.out == ""


def test_edit_scene_missing_scene_exits_1(tmp_path, dataset_dir, capsys):
    out = tmp_path / "edit"
    code, captured = _run(
        capsys, "edit-scene",
        "--set", f"dataset={dataset_dir}", "--set", f"scene={tmp_path / 'nope.dgsc'}",
        "--set", f"output_dir={out}",
    )
    assert code == 1
    assert _last_json(captured.err)["error"] == "SnapshotMissingError"
    assert json.loads((out / "report.json").read_text())["status"] == "failed"


def test_untyped_failure_exits_1(tmp_path, dataset_dir, monkeypatch, capsys):
    def explode(cfg):
        raise RuntimeError("out of memory")

    schema, _, help_text = cli.COMMANDS["gen-synthetic"]
    monkeypatch.setitem(cli.COMMANDS, "gen-synthetic", (schema, explode, help_text))
    code, captured = _run(capsys, "gen-synthetic", "--set", f"output_dir={tmp_path / 'x'}")
    assert code == 1
    assert _last_json(captured.err) == {"error": "RuntimeError", "message": "out of memory"}


def test_corrupted_editor_checkpoint_exits_1(tmp_path, dataset_dir, capsys):
    broken = tmp_path / "editor.ckpt"
    broken.write_bytes(b"DGSC\x01\x00garbage")
    code, captured = _run(
        capsys, "finetune-editor",
        "--set", f"editor_checkpoint={broken}", "--set", f"output={tmp_path / 'tuned.ckpt'}",
        "--set", f"dataset={dataset_dir}", "--set", "keyframe_id=0000",
        "--set", f"edited_image={dataset_dir / 'images' / '0000.png'}", "--set", "instruction=[5]",
    )
    assert code == 1
    assert _last_json(captured.err)["error"] == "SnapshotTruncatedError"


def test_train_and_finetune_editor(tmp_path, dataset_dir, capsys):
    base = tmp_path / "editor.ckpt"
    tiny = '{"timesteps": 20, "base_width": 8, "blocks": 1, "sample_steps": 3, "batch_size": 2}'
    code, captured = _run(
        capsys, "train-editor",
        "--set", f"output={base}", "--set", "corpus_size=4", "--set", "image_size=16",
        "--set", "steps=3", "--set", f"editor={tiny}",
    )
    assert code == 0
    assert _last_json(captured.out)["steps"] == 3
    assert DiffusionEditor.load(base).config.base_width == 8

    dataset = load_dataset(dataset_dir)
    edited = tmp_path / "edited.png"
    save_image(edited, mask_recolor(dataset.image("0000"), dataset.mask("0000"), 120.0))
    tuned = tmp_path / "tuned.ckpt"
    code, captured = _run(
        capsys, "finetune-editor",
        "--set", f"editor_checkpoint={base}", "--set", f"output={tuned}", "--set", f"dataset={dataset_dir}",
        "--set", "keyframe_id=0000", "--set", f"edited_image={edited}", "--set", "instruction=[5]",
        "--set", "prior_count=2", "--set", "steps=2", "--set", "augment=false",
    )
    assert code == 0
    summary = _last_json(captured.out)
    assert summary["steps"] == 2
    assert tuned.exists()
