"""
Synthetic dynamic scenes with analytic ground truth.

Frames are rendered by casting rays against axis-aligned ellipsoids whose
centers follow polynomial trajectories in normalized time. This module never
touches the Gaussian rasterizer, so reconstruction can be checked against an
independent renderer.
"""

import json
from pathlib import Path
from typing import Dict, List, Literal, NamedTuple, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.data.dataset import MANIFEST_VERSION, Dataset, Frame, Intrinsics, save_dataset
from src.data.images import save_mask
from src.splatting.geometry import Camera
from src.utils.exceptions import FrustumError, InvalidArgumentError
from src.utils.logger import get_logger

logger = get_logger(__name__)

SPEC_FILE = "synthetic_spec.json"
SUPERSAMPLE_OFFSETS = (-0.25, 0.25)


class EllipsoidSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    trajectory: List[List[float]] = Field(
        ..., min_length=1, description="Polynomial coefficients c_k (3-vectors); center(t) = sum c_k t^k"
    )
    radii: List[float] = Field(..., min_length=3, max_length=3)
    color: List[float] = Field(..., min_length=3, max_length=3)

    @field_validator("trajectory")
    @classmethod
    def validate_trajectory(cls, v):
        if any(len(c) != 3 for c in v):
            raise ValueError("trajectory coefficients must be 3-vectors")
        return v

    @field_validator("radii")
    @classmethod
    def validate_radii(cls, v):
        if any(r <= 0 for r in v):
            raise ValueError("radii must be positive")
        return v

    @field_validator("color")
    @classmethod
    def validate_color(cls, v):
        if any(c < 0 or c > 1 for c in v):
            raise ValueError("colors must lie in [0, 1]")
        return v

    def center(self, t: float) -> np.ndarray:
        coeffs = np.asarray(self.trajectory, dtype=np.float64)
        powers = t ** np.arange(len(coeffs), dtype=np.float64)
        return powers @ coeffs


class CameraPathSpec(BaseModel):
    """Cameras on a horizontal circle around ``target``.

    Monocular: one camera sweeping ``arc_degrees`` over the sequence.
    Multi-camera: ``views`` fixed cameras spread over ``arc_degrees``, each
    capturing every timestamp.
    """

    model_config = ConfigDict(extra="forbid")

    layout: Literal["monocular", "multi_camera"] = "monocular"
    radius: float = Field(4.0, gt=0)
    elevation: float = 0.5
    start_degrees: float = 0.0
    arc_degrees: float = 30.0
    views: int = Field(1, ge=1)
    target: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0], min_length=3, max_length=3)


class SyntheticSceneSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ellipsoids: List[EllipsoidSpec] = Field(default_factory=list)
    camera: CameraPathSpec = Field(default_factory=CameraPathSpec)
    width: int = Field(32, ge=11)
    height: int = Field(32, ge=11)
    frame_count: int = Field(24, ge=1)
    focal: float = Field(40.0, gt=0, description="Focal length in pixels")
    background: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0], min_length=3, max_length=3)
    znear: float = Field(0.01, gt=0)
    mask_object: Optional[int] = Field(0, ge=0, description="Ellipsoid whose mask is stored with the dataset")
    seed: int = 0

    @model_validator(mode="after")
    def check_mask_object(self):
        if self.mask_object is not None and self.ellipsoids and self.mask_object >= len(self.ellipsoids):
            raise ValueError("mask_object does not name an ellipsoid")
        return self


class SyntheticScene(NamedTuple):
    dataset: Dataset
    images: Dict[str, np.ndarray]
    object_masks: Dict[str, np.ndarray]  # frame_id -> (K, H, W) bool
    spec: SyntheticSceneSpec

    def masks_for(self, index: int) -> Dict[str, np.ndarray]:
        return {fid: masks[index] for fid, masks in self.object_masks.items()}


def timestamps(frame_count: int) -> List[float]:
    if frame_count == 1:
        return [0.0]
    return [k / (frame_count - 1) for k in range(frame_count)]


def _orbit_camera(spec: SyntheticSceneSpec, degrees: float) -> Camera:
    path = spec.camera
    theta = np.radians(degrees)
    target = np.asarray(path.target, dtype=np.float64)
    eye = target + np.array([path.radius * np.sin(theta), path.elevation, -path.radius * np.cos(theta)])
    return Camera.look_at(
        eye, target, (0.0, 1.0, 0.0),
        fx=spec.focal, fy=spec.focal, width=spec.width, height=spec.height, znear=spec.znear,
    )


def camera_rig(spec: SyntheticSceneSpec) -> List[Tuple[str, str, float, Camera]]:
    """(frame_id, camera_id, timestamp, camera) for every frame, grouped per camera."""
    path = spec.camera
    stamps = timestamps(spec.frame_count)
    rig = []
    if path.layout == "monocular":
        for k, t in enumerate(stamps):
            rig.append((f"{k:04d}", "cam00", t, _orbit_camera(spec, path.start_degrees + path.arc_degrees * t)))
        return rig
    for v in range(path.views):
        frac = v / (path.views - 1) if path.views > 1 else 0.0
        cam = _orbit_camera(spec, path.start_degrees + path.arc_degrees * frac)
        for k, t in enumerate(stamps):
            rig.append((f"cam{v:02d}_{k:04d}", f"cam{v:02d}", t, cam))
    return rig


def _check_frustum(spec: SyntheticSceneSpec, cam: Camera, centers: List[np.ndarray], frame_id: str) -> None:
    rot = np.asarray(cam.world_to_camera)[:, :3]
    trans = np.asarray(cam.world_to_camera)[:, 3]
    for i, (ellipsoid, center) in enumerate(zip(spec.ellipsoids, centers)):
        p = rot @ center + trans
        if p[2] - max(ellipsoid.radii) <= cam.znear:
            raise FrustumError(f"ellipsoid {i} crosses the near plane in frame {frame_id}")
        u = cam.fx * p[0] / p[2] + cam.cx
        v = cam.fy * p[1] / p[2] + cam.cy
        if not (0 <= u <= cam.width - 1 and 0 <= v <= cam.height - 1):
            raise FrustumError(f"ellipsoid {i} leaves the image in frame {frame_id} (center at {u:.1f}, {v:.1f})")


def _ray_directions(cam: Camera) -> np.ndarray:
    """World-space ray directions for a 2x2 supersampling grid, shape (H, W, S, 3)."""
    offsets = np.array([(dy, dx) for dy in SUPERSAMPLE_OFFSETS for dx in SUPERSAMPLE_OFFSETS])
    ys, xs = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    sx = xs[..., None] + offsets[:, 1]
    sy = ys[..., None] + offsets[:, 0]
    d_cam = np.stack([(sx - cam.cx) / cam.fx, (sy - cam.cy) / cam.fy, np.ones_like(sx)], axis=-1)
    rot = np.asarray(cam.world_to_camera)[:, :3]
    return d_cam @ rot


def render_ellipsoids(
    spec: SyntheticSceneSpec, cam: Camera, t: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic frame at time ``t``: (image (H, W, 3), object masks (K, H, W)).

    Each subsample takes the color of the nearest ellipsoid its ray hits; the
    pixel is the subsample mean. A pixel belongs to an object's mask when any
    of its subsamples sees that object.
    """
    directions = _ray_directions(cam)
    origin = cam.center()
    nearest = np.full(directions.shape[:-1], np.inf)
    owner = np.full(directions.shape[:-1], -1, dtype=np.int64)

    for i, ellipsoid in enumerate(spec.ellipsoids):
        radii = np.asarray(ellipsoid.radii)
        o = (origin - ellipsoid.center(t)) / radii
        d = directions / radii
        a = np.einsum("...k,...k->...", d, d)
        b = 2.0 * (d @ o)
        c = o @ o - 1.0
        disc = b * b - 4.0 * a * c
        hit = disc >= 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        near = (-b - root) / (2.0 * a)
        far = (-b + root) / (2.0 * a)
        s = np.where(near > 0, near, far)
        hit &= s > 0
        closer = hit & (s < nearest)
        nearest = np.where(closer, s, nearest)
        owner = np.where(closer, i, owner)

    palette = np.vstack([np.asarray(spec.background, dtype=np.float64)[None]] +
                        [np.asarray(e.color, dtype=np.float64)[None] for e in spec.ellipsoids])
    image = palette[owner + 1].mean(axis=2)
    masks = np.stack(
        [(owner == i).any(axis=2) for i in range(len(spec.ellipsoids))]
    ) if spec.ellipsoids else np.zeros((0, cam.height, cam.width), dtype=bool)
    return image, masks


def write_masks(path: Union[str, Path], object_masks: Dict[str, np.ndarray]) -> None:
    """One PNG per (frame, object): ``masks/<frame_id>_obj<k>.png``."""
    root = Path(path) / "masks"
    for frame_id, masks in object_masks.items():
        for k, mask in enumerate(masks):
            save_mask(root / f"{frame_id}_obj{k}.png", mask)


def generate_synthetic(spec: SyntheticSceneSpec, out_dir: Optional[Union[str, Path]] = None) -> SyntheticScene:
    if spec.frame_count < 2 and spec.camera.layout == "monocular":
        logger.warning("Single-frame synthetic sequence", frame_count=spec.frame_count)
    rig = camera_rig(spec)
    keep_mask = spec.mask_object is not None and bool(spec.ellipsoids)

    frames, images, object_masks = [], {}, {}
    for frame_id, camera_id, t, cam in rig:
        _check_frustum(spec, cam, [e.center(t) for e in spec.ellipsoids], frame_id)
        image, masks = render_ellipsoids(spec, cam, t)
        images[frame_id] = image
        object_masks[frame_id] = masks
        frames.append(
            Frame(
                frame_id=frame_id,
                image_path=f"images/{frame_id}.png",
                camera_id=camera_id,
                timestamp=t,
                camera=cam,
                mask_path=f"masks/{frame_id}.png" if keep_mask else None,
            )
        )

    dataset = Dataset(
        root=None,
        layout=spec.camera.layout,
        width=spec.width,
        height=spec.height,
        intrinsics=Intrinsics(
            fx=spec.focal, fy=spec.focal,
            cx=(spec.width - 1) / 2.0, cy=(spec.height - 1) / 2.0, znear=spec.znear,
        ),
        frames=frames,
    )
    dataset._images.update(images)
    if keep_mask:
        dataset._masks.update({fid: m[spec.mask_object] for fid, m in object_masks.items()})

    scene = SyntheticScene(dataset, images, object_masks, spec)
    logger.info(
        "Synthetic scene generated",
        frames=len(frames), objects=len(spec.ellipsoids), layout=spec.camera.layout,
    )
    if out_dir is not None:
        out = Path(out_dir)
        save_dataset(out, dataset, images)
        write_masks(out, object_masks)
        (out / SPEC_FILE).write_text(
            json.dumps({"version": MANIFEST_VERSION, "spec": spec.model_dump()}, indent=2), encoding="utf-8"
        )
        dataset.root = out
    return scene


def load_synthetic_spec(path: Union[str, Path]) -> SyntheticSceneSpec:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return SyntheticSceneSpec(**payload.get("spec", payload))


def moving_blob_spec(
    frame_count: int = 24,
    size: int = 32,
    layout: str = "monocular",
    views: int = 3,
    seed: int = 0,
) -> SyntheticSceneSpec:
    """A static body plus a small sphere sliding across it along x."""
    if layout not in ("monocular", "multi_camera"):
        raise InvalidArgumentError(f"unknown layout {layout}")
    return SyntheticSceneSpec(
        ellipsoids=[
            EllipsoidSpec(trajectory=[[-0.7, 0.3, 0.0], [1.4, 0.0, 0.0]], radii=[0.3, 0.3, 0.3], color=[0.9, 0.2, 0.2]),
            EllipsoidSpec(trajectory=[[0.0, -0.2, 0.6]], radii=[0.9, 0.5, 0.4], color=[0.2, 0.5, 0.9]),
        ],
        camera=CameraPathSpec(layout=layout, views=views if layout == "multi_camera" else 1),
        width=size,
        height=size,
        frame_count=frame_count,
        focal=1.25 * size,
        seed=seed,
    )


def static_spec(frame_count: int = 8, size: int = 32, seed: int = 0) -> SyntheticSceneSpec:
    spec = moving_blob_spec(frame_count=frame_count, size=size, seed=seed)
    spec.ellipsoids[0] = EllipsoidSpec(trajectory=[[0.0, 0.3, 0.0]], radii=[0.3, 0.3, 0.3], color=[0.9, 0.2, 0.2])
    return spec
