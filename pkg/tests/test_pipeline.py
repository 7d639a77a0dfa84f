import json

import numpy as np
import pytest
import torch

from factories import small_field
from src.data.dataset import load_dataset
from src.data.metrics import psnr
from src.data.synthetic import generate_synthetic, moving_blob_spec, static_spec
from src.editor.oracles import EditOracle, MaskRecolorOracle
from src.pipeline import runner
from src.pipeline.buffer import EditedImageBuffer
from src.pipeline.events import EventLog, read_events
from src.pipeline.reconstruct import STAGE_CANONICAL, STAGE_JOINT, check_reconstructable, look_at_center, reconstruct
from src.pipeline.report import read_report
from src.pipeline.runner import EVENTS_NAME, REPORT_NAME, SCENE_NAME, box_region, run_edit
from src.pipeline.schemas import ReconstructConfig, RunConfig
from src.pipeline.stages import stage1_keyframe, stage2
from src.splatting.densify import DensifyConfig
from src.splatting.losses import LossWeights
from src.splatting.scene import GaussianCloud, SceneSnapshot, deform
from src.splatting.snapshot import load_snapshot, save_snapshot
from src.utils.exceptions import ConfigError, DegenerateDatasetError, KeyframeError, SnapshotMissingError


@pytest.fixture(scope="module")
def reconstructed(tmp_path_factory):
    """Blob dataset on disk plus a briefly reconstructed scene and its event log."""
    root = tmp_path_factory.mktemp("pipeline")
    dataset_dir = root / "blob"
    generate_synthetic(moving_blob_spec(frame_count=6, size=16), dataset_dir)
    cfg = ReconstructConfig(
        dataset=str(dataset_dir), output=str(root / "scene.dgsc"),
        iters=20, warmup_iters=10, init_points=60,
        deformation_depth=2, deformation_width=16, position_freqs=2, time_freqs=2,
        precision="wide", densify=DensifyConfig(interval_iters=5),
    )
    events = EventLog()
    scene = reconstruct(load_dataset(dataset_dir), cfg, events)
    save_snapshot(scene, cfg.output)
    return {"root": root, "dataset": dataset_dir, "scene": cfg.output, "events": events}


def _run_config(reconstructed, out, **kw):
    base = {
        "dataset": str(reconstructed["dataset"]),
        "scene": reconstructed["scene"],
        "output_dir": str(out),
        "keyframe": {"frame_id": "0000"},
        "oracle": {"kind": "mask_recolor", "mask_source": "dataset"},
        "schedule": {"edit_period_iters": 2, "stage1_iters": 4, "total_iters": 20},
        "densify": {"interval_iters": 2},
        "precision": "wide",
    }
    return RunConfig(**{**base, **kw})


class TestReconstruct:
    def test_phases_and_densification(self, reconstructed):
        events = reconstructed["events"]
        starts = events.of_kind("stage_start")
        assert [(e["stage"], e["iteration"]) for e in starts] == [(STAGE_CANONICAL, 0), (STAGE_JOINT, 11)]
        assert [e["iteration"] for e in events.of_kind("densify")] == [5, 10]
        assert events.of_kind("stage_end")[0]["iteration"] == 20

    def test_snapshot_metadata(self, reconstructed):
        scene = load_snapshot(reconstructed["scene"])
        assert scene.metadata["layout"] == "monocular"
        assert scene.metadata["iters"] == 20
        assert np.isfinite(scene.metadata["final_loss"])
        assert scene.frame_count == 6
        assert scene.dtype == torch.float64

    def test_single_timestamp_rejected(self):
        dataset = generate_synthetic(moving_blob_spec(frame_count=1, size=16)).dataset
        with pytest.raises(DegenerateDatasetError):
            check_reconstructable(dataset)

    def test_rig_looks_at_the_origin(self, blob_scene):
        center = look_at_center([f.camera for f in blob_scene.dataset.frames])
        np.testing.assert_allclose(center, 0.0, atol=1e-3)


def test_box_region():
    mask = box_region(8, 8, [0.25, 0.25, 0.75, 0.5])
    assert mask.sum() == 8
    assert mask[2:6, 2:4].all()


class TestRunEdit:
    def test_edit_run(self, reconstructed, tmp_path):
        result = run_edit(_run_config(reconstructed, tmp_path / "run"))
        report = result.report
        out = tmp_path / "run"
        assert report.status == "ok" and report.error is None
        for name in (REPORT_NAME, EVENTS_NAME, SCENE_NAME):
            assert (out / name).exists()
        assert sorted(p.name for p in (out / "renders").iterdir()) == [f"{k:04d}.png" for k in range(6)]
        assert len(list((out / "renders_before").iterdir())) == 6

        stage2_summary = report.stages["stage2"]
        edits = stage2_summary["edits"]
        assert len(edits) == 8
        assert [e["iteration"] for e in edits] == list(range(6, 21, 2))
        assert [e["seed"] for e in edits] == list(range(8))
        assert [e["warmup"] for e in edits] == [True] * 5 + [False] * 3
        assert stage2_summary["warmup_complete_iteration"] == 14
        assert all(e["frame_id"] != "0000" for e in edits)

        s1 = report.stages["stage1"]
        assert s1["iterations"] == 4
        assert s1["field_digest_before"] == s1["field_digest_after"]
        assert [d["iteration"] for d in s1["densify"]] == [2, 4]

        frames = {f.frame_id: f for f in report.frames}
        assert frames["0000"].edit_count == 1
        assert all(f.edit_count >= 1 for f in report.frames)
        assert report.buffer_timeline[0] == {"iteration": 4, "frame_id": "0000", "edit_count": 1, "size": 1}
        assert report.schedule["stage2_iters"] == 16
        assert report.metrics["gaussians"] == result.scene.cloud.num_gaussians

        on_disk = read_events(out / EVENTS_NAME)
        assert [e["iteration"] for e in on_disk if e["event"] == "edit"] == [e["iteration"] for e in edits]
        assert read_report(out / REPORT_NAME) == report

    def test_report_is_reproducible(self, reconstructed, tmp_path):
        out = tmp_path / "again"
        cfg = _run_config(reconstructed, out, schedule={"edit_period_iters": 2, "stage1_iters": 2, "total_iters": 8})
        run_edit(cfg)
        first = (out / REPORT_NAME).read_bytes()
        run_edit(cfg)
        assert (out / REPORT_NAME).read_bytes() == first

    def test_without_keyframe(self, reconstructed, tmp_path):
        cfg = _run_config(reconstructed, tmp_path / "plain", keyframe=None, oracle=None, save_renders=False)
        report = run_edit(cfg).report
        for stage in ("stage1", "stage2"):
            assert report.stages[stage] == {"skipped": True, "reason": "no keyframe edit configured", "iterations": 0}
        assert report.buffer_timeline == []
        assert all(f.psnr_ground_truth is None for f in report.frames)
        assert not (tmp_path / "plain" / "renders").exists()

    def test_stage2_skipped_when_stage1_uses_every_iteration(self, reconstructed, tmp_path):
        cfg = _run_config(reconstructed, tmp_path / "s1", schedule={"stage1_iters": 4, "total_iters": 4})
        report = run_edit(cfg).report
        assert report.stages["stage1"]["iterations"] == 4
        assert report.stages["stage2"]["skipped"]
        assert report.stages["stage2"]["reason"] == "total_iters equals stage1_iters"

    def test_unknown_keyframe_fails_the_report(self, reconstructed, tmp_path):
        out = tmp_path / "bad"
        with pytest.raises(KeyframeError):
            run_edit(_run_config(reconstructed, out, keyframe={"frame_id": "9999"}))
        report = json.loads((out / REPORT_NAME).read_text())
        assert report["status"] == "failed"
        assert report["error"]["type"] == "KeyframeError"
        assert read_events(out / EVENTS_NAME)[-1]["event"] == "run_failed"

    def test_missing_scene_file_fails_the_report(self, reconstructed, tmp_path):
        out = tmp_path / "noscene"
        with pytest.raises(SnapshotMissingError):
            run_edit(_run_config(reconstructed, out, scene=str(tmp_path / "absent.dgsc")))
        report = json.loads((out / REPORT_NAME).read_text())
        assert report["status"] == "failed"
        assert report["error"]["type"] == "SnapshotMissingError"

    def test_untyped_exception_fails_the_report(self, reconstructed, tmp_path, monkeypatch):
        def explode(*args, **kwargs):
            raise RuntimeError("tile kernel exploded")

        monkeypatch.setattr(runner, "render_frames", explode)
        out = tmp_path / "crash"
        with pytest.raises(RuntimeError):
            run_edit(_run_config(reconstructed, out))
        report = json.loads((out / REPORT_NAME).read_text())
        assert report["status"] == "failed"
        assert report["error"] == {"type": "RuntimeError", "message": "tile kernel exploded"}
        last = read_events(out / EVENTS_NAME)[-1]
        assert (last["event"], last["error"]) == ("run_failed", "RuntimeError")

    def test_unknown_held_out_frame(self, reconstructed, tmp_path):
        with pytest.raises(ConfigError):
            run_edit(_run_config(reconstructed, tmp_path / "held", held_out_frames=["0099"]))

    def test_held_out_frames_are_never_edited(self, reconstructed, tmp_path):
        cfg = _run_config(reconstructed, tmp_path / "held", held_out_frames=["0003"])
        report = run_edit(cfg).report
        assert all(e["frame_id"] != "0003" for e in report.stages["stage2"]["edits"])
        frames = {f.frame_id: f for f in report.frames}
        assert frames["0003"].held_out and frames["0003"].edit_count == 0
        assert report.metrics["held_out_psnr_ground_truth"] is not None
        # four unedited frames: warm-up ends at the fourth tick
        assert report.stages["stage2"]["warmup_complete_iteration"] == 12


@pytest.mark.slow
def test_default_schedule_constants(reconstructed, tmp_path):
    cfg = _run_config(reconstructed, tmp_path / "defaults", schedule={"total_iters": 400}, densify={},
                      save_renders=False)
    report = run_edit(cfg).report
    schedule = report.schedule
    assert (schedule["stage1_iters"], schedule["stage2_iters"], schedule["edit_period_iters"]) == (300, 100, 50)
    assert schedule["lambda_dssim"] == 0.2 and schedule["lambda_temporal"] == 0.001
    assert [e["iteration"] for e in report.stages["stage2"]["edits"]] == [350, 400]
    assert [d["iteration"] for d in report.stages["stage1"]["densify"]] == [100, 200, 300]


def _stage_scene(dataset):
    generator = torch.Generator().manual_seed(0)
    cloud = GaussianCloud.create_random(40, extent=0.8, generator=generator, dtype=torch.float64)
    return SceneSnapshot(cloud=cloud, field=small_field(output_std=0.01), scene_extent=1.0,
                         frame_count=len(dataset.frames))


def _image(dataset, fid):
    return torch.as_tensor(dataset.image(fid), dtype=torch.float64)


class _IdentityOracle(EditOracle):
    def __init__(self, fail_first: bool = False):
        self.calls = 0
        self.fail_first = fail_first

    def edit(self, image, frame_id, seed):
        self.calls += 1
        if self.fail_first and self.calls == 1:
            raise RuntimeError("oracle unavailable")
        return np.array(image, dtype=np.float64)


class TestStages:
    def test_stage1_freezes_the_field(self, blob_scene):
        dataset = blob_scene.dataset
        scene = _stage_scene(dataset)
        keyframe = dataset.frame("0002")
        events = EventLog()
        result = stage1_keyframe(scene, keyframe, _image(dataset, "0002"), 6, DensifyConfig(interval_iters=3),
                                 events=events)
        assert result.field_digest_before == result.field_digest_after
        assert result.iterations == 6
        assert [d["iteration"] for d in result.densify] == [3, 6]
        assert all(r["frame_id"] == "0002" and not r["temporal_active"] for r in result.loss_curve)
        assert all(p.requires_grad for p in scene.field.parameters())
        assert [e["event"] for e in events.records][0] == "stage_start"

    def test_warmup_trains_on_buffered_frames_only(self, blob_scene):
        dataset = blob_scene.dataset
        scene = _stage_scene(dataset)
        oracle = MaskRecolorOracle(lambda fid: dataset.mask(fid), 90.0)
        buffer = EditedImageBuffer("0000", _image(dataset, "0000"), dataset.frame_ids)
        seen = []

        def on_step(step, buf):
            seen.append((step.iteration, step.frame_id in buf, step.temporal_active, buf.warmup_over))

        result = stage2(scene, oracle, dataset, buffer, 16, 2, LossWeights(lambda_temporal=0.01), on_step=on_step)
        assert all(in_buffer for _, in_buffer, _, _ in seen)
        assert all(active == over for _, _, active, over in seen)
        assert any(over for *_, over in seen)
        assert all(e["iteration"] % 2 == 0 for e in result.edits)
        assert result.warmup_complete_iteration == 10
        assert buffer.warmup_over

    def test_failed_edit_is_retried(self, blob_scene):
        dataset = blob_scene.dataset
        scene = _stage_scene(dataset)
        buffer = EditedImageBuffer("0000", _image(dataset, "0000"), dataset.frame_ids)
        events = EventLog()
        result = stage2(scene, _IdentityOracle(fail_first=True), dataset, buffer, 6, 2, LossWeights(), events=events)
        assert len(result.failures) == 1
        assert result.failures[0]["iteration"] == 2
        assert result.edits[0]["frame_id"] == result.failures[0]["frame_id"]
        assert result.edits[0]["iteration"] == 4
        assert len(events.of_kind("edit_failed")) == 1

    def test_pinned_keyframe_leaves_nothing_to_edit(self, blob_scene):
        dataset = blob_scene.dataset
        scene = _stage_scene(dataset)
        buffer = EditedImageBuffer("0000", _image(dataset, "0000"), ["0000"])
        events = EventLog()
        result = stage2(scene, _IdentityOracle(), dataset, buffer, 4, 2, LossWeights(), events=events,
                        iteration_offset=10)
        assert result.edits == []
        assert [e["iteration"] for e in events.of_kind("edit_idle")] == [12, 14]
        assert result.warmup_complete_iteration == 10

    def test_unpinned_keyframe_is_reedited(self, blob_scene):
        dataset = blob_scene.dataset
        scene = _stage_scene(dataset)
        buffer = EditedImageBuffer("0000", _image(dataset, "0000"), ["0000"])
        result = stage2(scene, _IdentityOracle(), dataset, buffer, 4, 2, LossWeights(), pin_keyframe=False)
        assert [e["frame_id"] for e in result.edits] == ["0000", "0000"]
        assert buffer.entry("0000").edit_count == 3

    def test_disabled_buffer_trains_every_frame(self, blob_scene):
        dataset = blob_scene.dataset
        scene = _stage_scene(dataset)
        buffer = EditedImageBuffer("0000", _image(dataset, "0000"), dataset.frame_ids)
        seen = []
        stage2(scene, _IdentityOracle(), dataset, buffer, 8, 100, LossWeights(), buffer_disabled=True,
               on_step=lambda step, buf: seen.append(step.frame_id))
        assert len(seen) == 8
        assert set(seen) - {"0000"}

        scene = _stage_scene(dataset)
        buffer = EditedImageBuffer("0000", _image(dataset, "0000"), dataset.frame_ids)
        seen.clear()
        stage2(scene, _IdentityOracle(), dataset, buffer, 8, 100, LossWeights(),
               on_step=lambda step, buf: seen.append(step.frame_id))
        assert set(seen) == {"0000"}


@pytest.fixture(scope="module")
def blob_sequence(tmp_path_factory):
    """The 24-frame 32x32 blob sequence reconstructed with the default schedule."""
    root = tmp_path_factory.mktemp("sequence")
    dataset_dir = root / "blob"
    generate_synthetic(moving_blob_spec(), dataset_dir)
    cfg = ReconstructConfig(dataset=str(dataset_dir), output=str(root / "scene.dgsc"))
    scene = reconstruct(load_dataset(dataset_dir), cfg)
    save_snapshot(scene, cfg.output)
    return {"dataset": dataset_dir, "scene": cfg.output}


def _sequence_config(blob_sequence, out, **kw):
    defaults = {"densify": {}, "precision": None, "save_renders": False}
    return _run_config(blob_sequence, out, **{**defaults, **kw})


@pytest.mark.slow
class TestEditPropagation:
    def test_reconstruction_matches_the_analytic_renders(self, blob_sequence):
        dataset = load_dataset(blob_sequence["dataset"])
        renders = runner.render_frames(load_snapshot(blob_sequence["scene"]), dataset.frames)
        scores = [psnr(renders[f.frame_id], dataset.image(f.frame_id)) for f in dataset.frames]
        assert np.mean(scores) > 30.0

    def test_static_scene_learns_no_deformation(self, tmp_path):
        dataset = generate_synthetic(static_spec()).dataset
        scene = reconstruct(dataset, ReconstructConfig(dataset="static", output=str(tmp_path / "static.dgsc")))
        with torch.no_grad():
            magnitudes = [float(deform(scene.cloud, scene.field, t).d_xyz.norm(dim=-1).mean())
                          for t in dataset.timestamps]
        assert np.mean(magnitudes) < 1e-3

    def test_edit_reaches_held_out_frames(self, blob_sequence, tmp_path):
        held = ["0005", "0011", "0017", "0023"]
        cfg = _sequence_config(blob_sequence, tmp_path / "e2e", schedule={}, held_out_frames=held)
        report = run_edit(cfg).report
        assert report.status == "ok"
        assert report.metrics["held_out_psnr_ground_truth"] > 25.0
        assert report.metrics["mean_psnr_ground_truth"] > 25.0
        assert report.metrics["edit_locality"] < 0.02

    def test_buffer_outperforms_unbuffered_training(self, blob_sequence, tmp_path):
        schedule = {"total_iters": 1300}
        buffered = run_edit(_sequence_config(blob_sequence, tmp_path / "buffered", schedule=schedule)).report
        unbuffered = run_edit(_sequence_config(blob_sequence, tmp_path / "unbuffered", schedule=schedule,
                                               buffer_disabled=True)).report
        assert buffered.schedule["stage2_iters"] == 1000
        gap = buffered.metrics["mean_psnr_ground_truth"] - unbuffered.metrics["mean_psnr_ground_truth"]
        assert gap >= 3.0

    def test_added_content_grows_the_cloud(self, blob_sequence, tmp_path):
        cfg = _sequence_config(blob_sequence, tmp_path / "sprite", oracle={"kind": "overlay"},
                               schedule={"total_iters": 300})
        report = run_edit(cfg).report
        stage1 = report.stages["stage1"]
        assert stage1["field_digest_before"] == stage1["field_digest_after"]
        counts = [c["count"] for c in report.gaussian_counts]
        assert counts[-1] > counts[0]

    def test_temporal_loss_smooths_the_sequence(self, blob_sequence, tmp_path):
        runs = {}
        for lam in (0.0, 0.001):
            runs[lam] = [
                run_edit(_sequence_config(blob_sequence, tmp_path / f"t{lam}-{seed}", schedule={"total_iters": 800},
                                          weights={"lambda_temporal": lam}, seed=seed)).report.metrics
                for seed in range(3)
            ]
        consistency = {lam: np.mean([m["temporal_consistency"] for m in runs[lam]]) for lam in runs}
        quality = {lam: np.mean([m["mean_psnr_ground_truth"] for m in runs[lam]]) for lam in runs}
        assert consistency[0.001] > consistency[0.0]
        assert quality[0.0] - quality[0.001] < 0.5
