"""
Quaternion algebra, 3D covariances and EWA projection to screen space.

Quaternions are stored (w, x, y, z), Hamilton product, right-handed frames.
Every function here is batched over leading dimensions and differentiable
through torch autograd.
"""

from typing import List, NamedTuple, Optional

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config.settings import RenderConfig
from src.utils.exceptions import InvalidArgumentError


class Camera(BaseModel):
    """Pinhole camera with a rigid world-to-camera transform."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    fx: float = Field(..., gt=0, description="Focal length in pixels (x)")
    fy: float = Field(..., gt=0, description="Focal length in pixels (y)")
    cx: float
    cy: float
    width: int = Field(..., ge=1)
    height: int = Field(..., ge=1)
    world_to_camera: List[List[float]] = Field(..., description="3x4 rigid transform [W | t]")
    znear: float = Field(0.01, gt=0)

    @field_validator("world_to_camera")
    @classmethod
    def validate_transform(cls, v):
        m = np.asarray(v, dtype=np.float64)
        if m.shape != (3, 4):
            raise ValueError("world_to_camera must be 3x4")
        rot = m[:, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() >= 1e-6:
            raise ValueError("world_to_camera rotation block is not orthonormal")
        return [list(map(float, row)) for row in m]

    @model_validator(mode="after")
    def check_finite(self):
        if not np.all(np.isfinite(self.world_to_camera)):
            raise ValueError("world_to_camera must be finite")
        return self

    def rotation(self, dtype=torch.float64, device=None) -> torch.Tensor:
        return torch.tensor([row[:3] for row in self.world_to_camera], dtype=dtype, device=device)

    def translation(self, dtype=torch.float64, device=None) -> torch.Tensor:
        return torch.tensor([row[3] for row in self.world_to_camera], dtype=dtype, device=device)

    def center(self) -> np.ndarray:
        m = np.asarray(self.world_to_camera)
        return -m[:, :3].T @ m[:, 3]

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None, znear=0.01):
        """Build a camera at ``eye`` looking at ``target`` (+z forward, +y down)."""
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        forward = target - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        trans = -rot @ eye
        return cls(
            fx=fx, fy=fy,
            cx=(width - 1) / 2.0 if cx is None else cx,
            cy=(height - 1) / 2.0 if cy is None else cy,
            width=width, height=height,
            world_to_camera=np.concatenate([rot, trans[:, None]], axis=1).tolist(),
            znear=znear,
        )


def quat_to_rotation(q: torch.Tensor) -> torch.Tensor:
    """Convert (..., 4) quaternions to (..., 3, 3) rotation matrices."""
    norm = torch.linalg.norm(q, dim=-1, keepdim=True)
    if q.numel() and bool((norm <= 1e-12).any()):
        raise InvalidArgumentError("quaternion with zero norm cannot be converted to a rotation")
    q = q / norm
    w, x, y, z = q.unbind(-1)

    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def build_covariance(rotation: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """Sigma = R diag(s)^2 R^T for activated (positive) scales."""
    R = quat_to_rotation(rotation)
    M = R * scale.unsqueeze(-2)
    return M @ M.transpose(-1, -2)


class Projection(NamedTuple):
    means2d: torch.Tensor  # (N, 2) pixels
    cov2d: torch.Tensor  # (N, 2, 2) pixels^2, low-pass floor included
    conic: torch.Tensor  # (N, 3) packed inverse (a, b, c) of [[a, b], [b, c]]
    depth: torch.Tensor  # (N,) camera-space z
    valid: torch.Tensor  # (N,) bool, False where culled by the near plane


def project_gaussians(means: torch.Tensor, cov3d: torch.Tensor, cam: Camera) -> Projection:
    """EWA-project (N, 3) means with (N, 3, 3) covariances into ``cam``."""
    dtype, device = means.dtype, means.device
    W = cam.rotation(dtype, device)
    t = cam.translation(dtype, device)

    p_cam = means @ W.T + t
    depth = p_cam[:, 2]
    valid = depth >= cam.znear
    # Culled entries get a safe depth so the discarded branch stays finite
    z = torch.where(valid, depth, torch.ones_like(depth))
    x, y = p_cam[:, 0], p_cam[:, 1]

    means2d = torch.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], dim=-1)

    zeros = torch.zeros_like(z)
    J = torch.stack(
        [
            torch.stack([cam.fx / z, zeros, -cam.fx * x / (z * z)], dim=-1),
            torch.stack([zeros, cam.fy / z, -cam.fy * y / (z * z)], dim=-1),
        ],
        dim=-2,
    )
    T = J @ W
    cov2d = T @ cov3d @ T.transpose(-1, -2)
    cov2d = cov2d + RenderConfig.LOW_PASS * torch.eye(2, dtype=dtype, device=device)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)
    return Projection(means2d, cov2d, conic, depth, valid)


class ProjectedGaussian(NamedTuple):
    mean: torch.Tensor
    cov2d: torch.Tensor
    conic: torch.Tensor
    det: torch.Tensor
    depth: torch.Tensor


def project_gaussian(x: torch.Tensor, cov3d: torch.Tensor, cam: Camera) -> Optional[ProjectedGaussian]:
    """Project a single Gaussian; returns None when culled by the near plane."""
    proj = project_gaussians(x.reshape(1, 3), cov3d.reshape(1, 3, 3), cam)
    if not bool(proj.valid[0]):
        return None
    cov2d = proj.cov2d[0]
    return ProjectedGaussian(
        mean=proj.means2d[0],
        cov2d=cov2d,
        conic=torch.stack([
            torch.stack([proj.conic[0, 0], proj.conic[0, 1]]),
            torch.stack([proj.conic[0, 1], proj.conic[0, 2]]),
        ]),
        det=torch.linalg.det(cov2d),
        depth=proj.depth[0],
    )
