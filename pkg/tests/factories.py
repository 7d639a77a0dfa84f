"""Builders for small scenes and cameras shared by the test modules."""

import numpy as np
import torch

from src.splatting.geometry import Camera
from src.splatting.scene import DeformationField, GaussianCloud, SceneSnapshot


def identity_camera(size: int = 16, focal: float = 20.0) -> Camera:
    """Camera at the origin looking down +z, principal point at the image center."""
    return Camera(
        fx=focal, fy=focal, cx=(size - 1) / 2.0, cy=(size - 1) / 2.0, width=size, height=size,
        world_to_camera=[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
    )


def random_cloud(n: int, seed: int = 0, dtype=torch.float64, spread: float = 0.6, log_scale=(-2.5, -1.0),
                 opacity=(-2.0, 2.0), depth=3.0) -> GaussianCloud:
    """Gaussians scattered in front of ``identity_camera``."""
    rng = np.random.default_rng(seed)
    xyz = np.column_stack([
        rng.uniform(-spread, spread, n),
        rng.uniform(-spread, spread, n),
        rng.uniform(depth - 0.5, depth + 0.5, n),
    ])
    rotation = rng.normal(size=(n, 4))
    scaling = rng.uniform(log_scale[0], log_scale[1], (n, 3))
    opacity_raw = rng.uniform(opacity[0], opacity[1], n)
    color = rng.normal(size=(n, 3))
    return GaussianCloud.from_arrays(xyz, rotation, scaling, opacity_raw, color, dtype=dtype)


def small_field(dtype=torch.float64, seed: int = 0, output_std: float = 0.0) -> DeformationField:
    torch.manual_seed(seed)
    field = DeformationField(depth=2, width=16, position_freqs=2, time_freqs=2).to(dtype=dtype)
    if output_std > 0:
        with torch.no_grad():
            field.output.weight.normal_(0.0, output_std)
            field.output.bias.normal_(0.0, output_std)
    return field


def make_scene(n: int = 20, seed: int = 0, dtype=torch.float64, output_std: float = 0.0, **cloud_kw) -> SceneSnapshot:
    return SceneSnapshot(
        cloud=random_cloud(n, seed, dtype, **cloud_kw),
        field=small_field(dtype, seed, output_std),
        scene_extent=1.0,
        frame_count=4,
    )
