"""
Canonical Gaussians plus the time-conditioned deformation field.

Raw parameters are stored unconstrained; activations are the only clamps:
positions as-is, quaternions normalized, scales exp, opacity and color sigmoid.
"""

import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from config.settings import DeformationDefaults
from src.splatting.geometry import Camera, build_covariance
from src.utils.exceptions import InvalidArgumentError
from src.utils.logger import get_logger

logger = get_logger(__name__)

PARAMETER_NAMES = ("xyz", "rotation", "scaling", "opacity", "color")


def inverse_sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x / (1 - x))


def positional_encoding(v: torch.Tensor, num_freqs: int) -> torch.Tensor:
    """Encode (..., k) inputs into (..., 2kL) sin/cos features.

    out[2L*i + 2j] = sin(2^j pi v_i), out[2L*i + 2j + 1] = cos(2^j pi v_i).
    """
    if num_freqs < 1:
        raise InvalidArgumentError("positional encoding needs at least one frequency")
    freqs = (2.0 ** torch.arange(num_freqs, dtype=v.dtype, device=v.device)) * math.pi
    angles = v.unsqueeze(-1) * freqs
    encoded = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return encoded.reshape(v.shape[:-1] + (2 * num_freqs * v.shape[-1],))


class PositionalEncoding(nn.Module):
    def __init__(self, num_freqs: int):
        super().__init__()
        if num_freqs < 1:
            raise InvalidArgumentError("positional encoding needs at least one frequency")
        self.num_freqs = num_freqs

    def output_dim(self, input_dim: int) -> int:
        return input_dim * 2 * self.num_freqs

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return positional_encoding(v, self.num_freqs)


class DeformOffsets(NamedTuple):
    d_xyz: torch.Tensor  # (N, 3)
    d_rotation: torch.Tensor  # (N, 4)
    d_scaling: torch.Tensor  # (N, 3)


class DeformationField(nn.Module):
    """MLP mapping (gamma(sg(x)), gamma(t)) to per-Gaussian offsets."""

    def __init__(
        self,
        depth: int = DeformationDefaults.DEPTH,
        width: int = DeformationDefaults.WIDTH,
        position_freqs: int = DeformationDefaults.POSITION_FREQS,
        time_freqs: int = DeformationDefaults.TIME_FREQS,
    ):
        super().__init__()
        self.depth = depth
        self.width = width
        self.position_encoding = PositionalEncoding(position_freqs)
        self.time_encoding = PositionalEncoding(time_freqs)

        in_dim = self.position_encoding.output_dim(3) + self.time_encoding.output_dim(1)
        layers = [nn.Linear(in_dim, width)]
        layers += [nn.Linear(width, width) for _ in range(depth - 1)]
        self.hidden = nn.ModuleList(layers)
        self.output = nn.Linear(width, DeformationDefaults.OUTPUT_DIM)
        nn.init.zeros_(self.output.weight)
        nn.init.zeros_(self.output.bias)

    def config(self) -> Dict[str, int]:
        return {
            "depth": self.depth,
            "width": self.width,
            "position_freqs": self.position_encoding.num_freqs,
            "time_freqs": self.time_encoding.num_freqs,
        }

    def forward(self, xyz: torch.Tensor, t: float) -> DeformOffsets:
        # stop-gradient: positions only enter the encoding as constants
        x_enc = self.position_encoding(xyz.detach())
        t_col = torch.full((xyz.shape[0], 1), float(t), dtype=xyz.dtype, device=xyz.device)
        h = torch.cat([x_enc, self.time_encoding(t_col)], dim=-1)
        for layer in self.hidden:
            h = torch.relu(layer(h))
        out = self.output(h)
        return DeformOffsets(out[:, :3], out[:, 3:7], out[:, 7:10])


class GaussianCloud:
    """Canonical Gaussians held as raw, optimizable parameter arrays."""

    def __init__(self, dtype=torch.float32, device="cpu"):
        self.dtype = dtype
        self.device = device
        self._xyz = torch.empty(0, 3, dtype=dtype, device=device)
        self._rotation = torch.empty(0, 4, dtype=dtype, device=device)
        self._scaling = torch.empty(0, 3, dtype=dtype, device=device)
        self._opacity = torch.empty(0, 1, dtype=dtype, device=device)
        self._color = torch.empty(0, 3, dtype=dtype, device=device)

    @classmethod
    def from_arrays(cls, xyz, rotation, scaling, opacity, color, dtype=torch.float32, device="cpu"):
        """Build from raw arrays (quaternion unnormalized, log scale, logit opacity/color)."""
        cloud = cls(dtype=dtype, device=device)
        arrays = {
            "xyz": xyz, "rotation": rotation, "scaling": scaling,
            "opacity": np.asarray(opacity).reshape(-1, 1) if not torch.is_tensor(opacity) else opacity.reshape(-1, 1),
            "color": color,
        }
        n = None
        for name, value in arrays.items():
            tensor = torch.as_tensor(value, dtype=dtype, device=device).clone()
            if n is None:
                n = tensor.shape[0]
            if tensor.shape[0] != n:
                raise InvalidArgumentError(f"parameter {name} has {tensor.shape[0]} rows, expected {n}")
            setattr(cloud, f"_{name}", nn.Parameter(tensor.requires_grad_(True)))
        return cloud

    @classmethod
    def create_random(
        cls,
        n: int,
        extent: float = 1.0,
        center=(0.0, 0.0, 0.0),
        init_opacity: float = 0.1,
        generator: Optional[torch.Generator] = None,
        dtype=torch.float32,
        device="cpu",
    ) -> "GaussianCloud":
        """Uniform points in a cube of half-size ``extent`` around ``center``."""
        if n <= 0:
            raise InvalidArgumentError("a scene needs at least one initial Gaussian")
        xyz = (torch.rand(n, 3, generator=generator, dtype=torch.float64) * 2 - 1) * extent
        xyz += torch.as_tensor(center, dtype=torch.float64)
        spacing = 2 * extent / max(n ** (1.0 / 3.0), 1.0)
        rotation = torch.zeros(n, 4, dtype=torch.float64)
        rotation[:, 0] = 1.0
        scaling = torch.full((n, 3), math.log(spacing * 0.5), dtype=torch.float64)
        opacity = inverse_sigmoid(torch.full((n, 1), init_opacity, dtype=torch.float64))
        color = (torch.rand(n, 3, generator=generator, dtype=torch.float64) - 0.5) * 0.2
        return cls.from_arrays(xyz, rotation, scaling, opacity, color, dtype=dtype, device=device)

    # raw parameters
    def parameters(self) -> Dict[str, torch.Tensor]:
        return {name: getattr(self, f"_{name}") for name in PARAMETER_NAMES}

    def replace_parameters(self, tensors: Dict[str, torch.Tensor]) -> None:
        for name in PARAMETER_NAMES:
            setattr(self, f"_{name}", tensors[name])

    def set_requires_grad(self, flag: bool, names: Iterable[str] = PARAMETER_NAMES) -> None:
        for name in names:
            getattr(self, f"_{name}").requires_grad_(flag)

    @property
    def num_gaussians(self) -> int:
        return self._xyz.shape[0]

    # activated views
    @property
    def get_xyz(self):
        return self._xyz

    @property
    def get_rotation(self):
        return torch.nn.functional.normalize(self._rotation, dim=-1)

    @property
    def get_scaling(self):
        return torch.exp(self._scaling)

    @property
    def get_opacity(self):
        return torch.sigmoid(self._opacity)

    @property
    def get_color(self):
        return torch.sigmoid(self._color)

    def get_covariance(self):
        return build_covariance(self._rotation, self.get_scaling)


class DeformedGaussians(NamedTuple):
    """Render-ready activated Gaussians at one time."""

    means: torch.Tensor  # (N, 3)
    rotations: torch.Tensor  # (N, 4) unit quaternions
    scales: torch.Tensor  # (N, 3) > 0
    opacities: torch.Tensor  # (N,)
    colors: torch.Tensor  # (N, 3)

    def covariances(self) -> torch.Tensor:
        return build_covariance(self.rotations, self.scales)

    @property
    def count(self) -> int:
        return self.means.shape[0]


def deform(cloud: GaussianCloud, field: DeformationField, t: float) -> DeformOffsets:
    """Offsets (dx, dr, ds) of every Gaussian at normalized time ``t``."""
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError(f"time {t} outside [0, 1]")
    return field(cloud.get_xyz, t)


def deformed_gaussians(
    cloud: GaussianCloud,
    field: Optional[DeformationField],
    t: float,
    offsets: Optional[DeformOffsets] = None,
) -> DeformedGaussians:
    """Apply offsets: x + dx, normalize(r + dr), exp(s_raw + ds); opacity and color unchanged."""
    if offsets is None and field is not None:
        offsets = deform(cloud, field, t)

    xyz, rot, scl = cloud._xyz, cloud._rotation, cloud._scaling
    if offsets is not None:
        xyz = xyz + offsets.d_xyz
        rot = rot + offsets.d_rotation
        scl = scl + offsets.d_scaling
    return DeformedGaussians(
        means=xyz,
        rotations=torch.nn.functional.normalize(rot, dim=-1),
        scales=torch.exp(scl),
        opacities=cloud.get_opacity.squeeze(-1),
        colors=cloud.get_color,
    )


def scene_extent_from_cameras(cameras: Iterable[Camera], minimum: float = 1.0) -> float:
    """Radius of the bounding sphere of camera centers (scaled by 1.1), floored at ``minimum``."""
    centers = np.stack([cam.center() for cam in cameras])
    mid = centers.mean(axis=0)
    radius = float(np.linalg.norm(centers - mid, axis=1).max()) * 1.1
    return max(radius, minimum)


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over every parameter's bytes, in registration order."""
    digest = hashlib.sha256()
    for name, param in module.named_parameters():
        digest.update(name.encode("utf-8"))
        digest.update(param.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


@dataclass
class SceneSnapshot:
    cloud: GaussianCloud
    field: DeformationField
    scene_extent: float
    frame_count: int = 0
    time_scale: float = 1.0
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if not self.scene_extent > 0:
            raise InvalidArgumentError("scene_extent must be positive")

    @property
    def dtype(self):
        return self.cloud.dtype
