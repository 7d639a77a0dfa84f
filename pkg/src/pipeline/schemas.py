"""
Run configuration schemas.

Every schema forbids unknown keys so a misspelled option fails before any
work starts. Config files are JSON; ``apply_overrides`` folds CLI
``--set dotted.key=value`` pairs into the raw dict before validation.
"""

import json
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Sequence, Type, TypeVar, Union

from pydantic import AfterValidator, BaseModel, ConfigDict, Field, ValidationError, model_validator

from config.settings import ScheduleDefaults
from src.editor.augmentation import AffineAugmentor
from src.editor.editor import EditorConfig
from src.splatting.densify import DensifyConfig
from src.splatting.losses import LossWeights
from src.splatting.optimizer import OptimizerConfig
from src.utils.exceptions import ConfigError

ConfigT = TypeVar("ConfigT", bound=BaseModel)


def _check_rgb(v: List[float]) -> List[float]:
    if len(v) != 3 or any(c < 0 or c > 1 for c in v):
        raise ValueError("expected three values in [0, 1]")
    return v


RGB = Annotated[List[float], AfterValidator(_check_rgb)]


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EditSchedule(Strict):
    edit_period_iters: int = Field(ScheduleDefaults.EDIT_PERIOD, ge=1)
    stage1_iters: Optional[int] = Field(None, ge=0, description="Defaults by layout: 300 monocular, 100 multi-camera")
    total_iters: int = Field(2000, ge=0)
    temporal_loss_after_warmup: bool = True

    def stage1_for(self, layout: str) -> int:
        if self.stage1_iters is not None:
            return self.stage1_iters
        if layout == "multi_camera":
            return ScheduleDefaults.STAGE1_MULTI_CAMERA
        return ScheduleDefaults.STAGE1_MONOCULAR

    def resolved(self, layout: str) -> "EditSchedule":
        schedule = self.model_copy(update={"stage1_iters": self.stage1_for(layout)})
        if schedule.stage1_iters > schedule.total_iters:
            raise ConfigError(
                f"stage1_iters ({schedule.stage1_iters}) exceeds total_iters ({schedule.total_iters})"
            )
        return schedule

    @property
    def stage2_iters(self) -> int:
        return self.total_iters - (self.stage1_iters or 0)


class SpriteSpec(Strict):
    size: List[int] = Field(default_factory=lambda: [6, 6], min_length=2, max_length=2)
    color: RGB = Field(default_factory=lambda: [1.0, 1.0, 0.0])
    alpha: float = Field(1.0, gt=0, le=1)
    anchor: List[int] = Field(default_factory=lambda: [2, 2], min_length=2, max_length=2, description="(row, col)")
    path: Optional[str] = Field(None, description="RGBA PNG overriding size/color/alpha")


class OracleSpec(Strict):
    kind: Literal["mask_recolor", "overlay", "diffusion"] = "mask_recolor"
    hue: float = Field(120.0, description="Hue rotation in degrees (mask_recolor)")
    mask_source: Literal["dataset", "box"] = "dataset"
    box: List[float] = Field(
        default_factory=lambda: [0.25, 0.25, 0.75, 0.75], min_length=4, max_length=4,
        description="(top, left, bottom, right) fractions when mask_source is 'box'",
    )
    sprite: SpriteSpec = Field(default_factory=SpriteSpec)
    editor_checkpoint: Optional[str] = None
    instruction: List[int] = Field(default_factory=list, description="Token indices of the plain instruction C_T*")
    personalized: bool = Field(True, description="Condition on the instruction with <V> inserted")
    image_guidance: Optional[float] = Field(None, ge=0)
    text_guidance: Optional[float] = Field(None, ge=0)
    sample_steps: Optional[int] = Field(None, ge=1)
    masked_sampling: bool = False

    @model_validator(mode="after")
    def check_diffusion(self):
        if self.kind == "diffusion" and not self.editor_checkpoint:
            raise ValueError("diffusion oracle needs editor_checkpoint")
        if self.kind == "diffusion" and not self.instruction:
            raise ValueError("diffusion oracle needs an instruction")
        return self


class KeyframeSpec(Strict):
    frame_id: str
    edited_image: Optional[str] = Field(None, description="PNG of the user edit; the oracle edits the frame when absent")


class RunConfig(Strict):
    """edit-scene: propagate one keyframe edit through a reconstructed scene."""

    dataset: str
    scene: str
    output_dir: str
    keyframe: Optional[KeyframeSpec] = None
    oracle: Optional[OracleSpec] = None
    schedule: EditSchedule = Field(default_factory=EditSchedule)
    weights: LossWeights = Field(default_factory=LossWeights)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    densify: DensifyConfig = Field(default_factory=DensifyConfig)
    stage2_lr_scale: float = Field(ScheduleDefaults.STAGE2_LR_SCALE, gt=0)
    train_color: bool = True
    buffer_disabled: bool = False
    pin_keyframe: bool = True
    held_out_frames: List[str] = Field(default_factory=list)
    report_ground_truth: bool = True
    save_renders: bool = True
    precision: Optional[Literal["fast", "wide"]] = None
    background: RGB = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    render_workers: Optional[int] = Field(None, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def check_edit(self):
        if self.keyframe is not None and self.oracle is None:
            raise ValueError("an edit run needs an oracle")
        if self.keyframe is not None and self.keyframe.frame_id in self.held_out_frames:
            raise ValueError("the keyframe cannot be held out")
        return self


class ReconstructConfig(Strict):
    dataset: str
    output: str
    iters: int = Field(3000, ge=1)
    warmup_iters: int = Field(1000, ge=0, description="Canonical-only iterations with densification")
    init_points: int = Field(500, ge=1)
    init_extent: Optional[float] = Field(None, gt=0, description="Half-size of the initial cube")
    init_opacity: float = Field(0.1, gt=0, lt=1)
    weights: LossWeights = Field(default_factory=lambda: LossWeights(lambda_temporal=0.0))
    optimizer: OptimizerConfig = Field(
        default_factory=lambda: OptimizerConfig(position_lr=1.6e-3, position_lr_final=1.6e-5, position_lr_max_steps=3000)
    )
    densify: DensifyConfig = Field(default_factory=DensifyConfig)
    deformation_depth: int = Field(6, ge=1)
    deformation_width: int = Field(128, ge=1)
    position_freqs: int = Field(10, ge=1)
    time_freqs: int = Field(6, ge=1)
    precision: Optional[Literal["fast", "wide"]] = None
    background: RGB = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    render_workers: Optional[int] = Field(None, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def check_iters(self):
        if self.warmup_iters > self.iters:
            raise ValueError("warmup_iters exceeds iters")
        return self


class EditorTrainConfig(Strict):
    """train-editor: base training on the synthetic channel-inversion corpus."""

    output: str
    corpus_size: int = Field(64, ge=1)
    image_size: int = Field(32, ge=8)
    channel: int = Field(0, ge=0, le=2)
    text: List[int] = Field(default_factory=lambda: [5], min_length=1)
    steps: int = Field(2000, ge=1)
    editor: EditorConfig = Field(default_factory=EditorConfig)
    seed: int = 0


class FinetuneConfig(Strict):
    """finetune-editor: personalize a base editor on the keyframe edit."""

    editor_checkpoint: str
    output: str
    dataset: str
    keyframe_id: str
    edited_image: str
    instruction: List[int] = Field(..., min_length=1, description="Plain instruction C_T*; <V> is inserted for the edit pair")
    prior_count: int = Field(8, ge=1)
    prior_weight: Optional[float] = Field(None, ge=0)
    steps: Optional[int] = Field(None, ge=0)
    augment: Optional[bool] = None
    augmentation: Optional[AffineAugmentor] = None
    seed: int = 0


class RenderJob(Strict):
    scene: str
    dataset: str
    output_dir: str
    frames: List[str] = Field(default_factory=list, description="Empty renders every frame")
    background: RGB = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    render_workers: Optional[int] = Field(None, ge=1)
    dump_contributors: bool = False


class EvalJob(Strict):
    renders: str
    targets: str
    output_dir: str
    before: Optional[str] = Field(None, description="Pre-edit renders for edit locality")
    masks: Optional[str] = Field(None, description="Directory of <name>.png masks for edit locality")
    dataset: Optional[str] = Field(None, description="Orders frames per camera for temporal consistency")


class SyntheticJob(Strict):
    output_dir: str
    preset: Literal["moving_blob", "static", "custom"] = "moving_blob"
    frame_count: int = Field(24, ge=1)
    image_size: int = Field(32, ge=11)
    layout: Literal["monocular", "multi_camera"] = "monocular"
    views: int = Field(3, ge=1)
    spec: Optional[Dict[str, Any]] = Field(None, description="Full synthetic scene spec for preset 'custom'")
    seed: int = 0


def _coerce(value: str) -> Any:
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Fold ``dotted.key=value`` pairs into ``raw``; values parse as JSON when they can."""
    result = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if not all(parts):
            raise ConfigError(f"override {item!r} has an empty key")
        node = result
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {item!r} descends into a non-object")
            node = child
        node[parts[-1]] = _coerce(value)
    return result


def load_config(
    schema: Type[ConfigT],
    path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
) -> ConfigT:
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    raw = apply_overrides(raw, overrides)
    try:
        return schema(**raw)
    except ValidationError as e:
        raise ConfigError(f"invalid {schema.__name__}: {e}") from e
