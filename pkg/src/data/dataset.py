"""
On-disk dataset: a directory of PNG frames plus ``manifest.json``.

The manifest field layout is documented in docs/FORMATS.md.
"""

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.data.images import image_size, load_image, load_mask, save_image, save_mask
from src.splatting.geometry import Camera
from src.utils.exceptions import (
    DatasetError,
    ImageSizeMismatchError,
    InvalidArgumentError,
    ManifestMissingError,
    TimestampOrderError,
)
from src.utils.logger import get_logger

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


class Intrinsics(BaseModel):
    model_config = ConfigDict(extra="forbid")

    fx: float = Field(..., gt=0)
    fy: float = Field(..., gt=0)
    cx: float
    cy: float
    znear: float = Field(0.01, gt=0)


class FrameEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    frame_id: str
    image: str
    camera_id: str
    timestamp: float = Field(..., ge=0.0, le=1.0)
    world_to_camera: List[List[float]]
    mask: Optional[str] = None


class Manifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: int = MANIFEST_VERSION
    layout: Literal["monocular", "multi_camera"]
    width: int = Field(..., ge=1)
    height: int = Field(..., ge=1)
    intrinsics: Intrinsics
    frames: List[FrameEntry]


@dataclass
class Frame:
    frame_id: str
    image_path: str
    camera_id: str
    timestamp: float
    camera: Camera
    mask_path: Optional[str] = None


@dataclass
class Dataset:
    root: Optional[Path]
    layout: str
    width: int
    height: int
    intrinsics: Intrinsics
    frames: List[Frame]
    _images: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _masks: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {f.frame_id: f for f in self.frames}

    @property
    def frame_ids(self) -> List[str]:
        return [f.frame_id for f in self.frames]

    @property
    def camera_ids(self) -> List[str]:
        seen = []
        for f in self.frames:
            if f.camera_id not in seen:
                seen.append(f.camera_id)
        return seen

    @property
    def timestamps(self) -> List[float]:
        return sorted({f.timestamp for f in self.frames})

    def frame(self, frame_id: str) -> Frame:
        try:
            return self._by_id[frame_id]
        except KeyError:
            raise InvalidArgumentError(f"unknown frame {frame_id}") from None

    def find(self, camera_id: str, timestamp: float) -> Optional[Frame]:
        for f in self.frames:
            if f.camera_id == camera_id and f.timestamp == timestamp:
                return f
        return None

    def image(self, frame_id: str) -> np.ndarray:
        if frame_id not in self._images:
            frame = self.frame(frame_id)
            self._images[frame_id] = load_image(self.root / frame.image_path)
        return self._images[frame_id]

    def mask(self, frame_id: str) -> Optional[np.ndarray]:
        if frame_id not in self._masks:
            frame = self.frame(frame_id)
            if frame.mask_path is None:
                return None
            self._masks[frame_id] = load_mask(self.root / frame.mask_path)
        return self._masks[frame_id]

    def adjacent_frame(self, frame_id: str) -> Optional[Frame]:
        """Same-camera frame with the nearest other timestamp; ties go to the earlier one."""
        frame = self.frame(frame_id)
        best = None
        for other in self.frames:
            if other.camera_id != frame.camera_id or other.frame_id == frame_id:
                continue
            gap = abs(other.timestamp - frame.timestamp)
            if gap == 0:
                continue
            key = (gap, other.timestamp)
            if best is None or key < best[0]:
                best = (key, other)
        return None if best is None else best[1]

    def to_manifest(self) -> Manifest:
        return Manifest(
            layout=self.layout,
            width=self.width,
            height=self.height,
            intrinsics=self.intrinsics,
            frames=[
                FrameEntry(
                    frame_id=f.frame_id,
                    image=f.image_path,
                    camera_id=f.camera_id,
                    timestamp=f.timestamp,
                    world_to_camera=f.camera.world_to_camera,
                    mask=f.mask_path,
                )
                for f in self.frames
            ],
        )


def _camera(manifest: Manifest, entry: FrameEntry) -> Camera:
    k = manifest.intrinsics
    return Camera(
        fx=k.fx, fy=k.fy, cx=k.cx, cy=k.cy,
        width=manifest.width, height=manifest.height,
        world_to_camera=entry.world_to_camera, znear=k.znear,
    )


def _validate_order(manifest: Manifest) -> None:
    ids = [f.frame_id for f in manifest.frames]
    if len(set(ids)) != len(ids):
        raise DatasetError("frame ids are not unique")
    per_camera = defaultdict(list)
    for f in manifest.frames:
        per_camera[f.camera_id].append(f.timestamp)
    for camera_id, stamps in per_camera.items():
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise TimestampOrderError(f"timestamps of camera {camera_id} are unsorted or duplicated")


def dataset_from_manifest(manifest: Manifest, root: Optional[Path] = None) -> Dataset:
    _validate_order(manifest)
    frames = []
    for entry in manifest.frames:
        try:
            camera = _camera(manifest, entry)
        except ValidationError as e:
            raise DatasetError(f"frame {entry.frame_id}: invalid camera: {e}") from e
        frames.append(Frame(entry.frame_id, entry.image, entry.camera_id, entry.timestamp, camera, entry.mask))
    return Dataset(
        root=root,
        layout=manifest.layout,
        width=manifest.width,
        height=manifest.height,
        intrinsics=manifest.intrinsics,
        frames=frames,
    )


def load_dataset(path: Union[str, Path]) -> Dataset:
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise ManifestMissingError(f"no {MANIFEST_NAME} in {root}")
    try:
        manifest = Manifest(**json.loads(manifest_path.read_text(encoding="utf-8")))
    except (ValidationError, json.JSONDecodeError) as e:
        raise DatasetError(f"invalid manifest {manifest_path}: {e}") from e

    dataset = dataset_from_manifest(manifest, root)
    for frame in dataset.frames:
        size = image_size(root / frame.image_path)
        if size != (dataset.width, dataset.height):
            raise ImageSizeMismatchError(
                f"{frame.image_path} is {size[0]}x{size[1]}, manifest says {dataset.width}x{dataset.height}"
            )
    logger.info("Dataset loaded", path=str(root), frames=len(dataset.frames), layout=dataset.layout)
    return dataset


def save_dataset(
    path: Union[str, Path],
    dataset: Dataset,
    images: Optional[Mapping[str, np.ndarray]] = None,
    masks: Optional[Mapping[str, np.ndarray]] = None,
) -> Path:
    """Write frames (from ``images`` or the dataset's own cache) and the manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for frame in dataset.frames:
        image = images[frame.frame_id] if images is not None else dataset.image(frame.frame_id)
        save_image(root / frame.image_path, image)
        if frame.mask_path is not None:
            mask = masks[frame.frame_id] if masks is not None else dataset.mask(frame.frame_id)
            save_mask(root / frame.mask_path, mask)

    manifest = dataset.to_manifest()
    (root / MANIFEST_NAME).write_text(json.dumps(manifest.model_dump(), indent=2), encoding="utf-8")
    logger.info("Dataset saved", path=str(root), frames=len(dataset.frames))
    return root
