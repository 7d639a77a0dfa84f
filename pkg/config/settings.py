from typing import Literal, Optional

from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings for the scene editor."""

    # Application
    app_name: str = "Deformable Scene Editor"
    app_version: str = "1.0.0"
    log_level: str = "INFO"
    log_format: Literal["json", "console"] = "json"

    # Numerics
    precision: Literal["fast", "wide"] = "fast"
    render_workers: int = 1

    # Monitoring
    metrics_port: Optional[int] = None

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="SCENE_EDITOR_",
        case_sensitive=False,
        extra="ignore",
    )

    @field_validator("render_workers")
    @classmethod
    def validate_render_workers(cls, v):
        if v < 1:
            raise ValueError("render_workers must be at least 1")
        return v


# Global settings instance
settings = Settings()


class RenderConfig:
    """Rasterizer constants."""

    TILE_SIZE = 16
    ALPHA_MAX = 0.99
    ALPHA_MIN = 1.0 / 255.0
    TRANSMITTANCE_MIN = 1e-4
    LOW_PASS = 0.3  # px^2 added to both diagonal entries of the 2D covariance
    BOUND_MARGIN = 1.0  # px


class DeformationDefaults:
    """Deformation MLP architecture."""

    DEPTH = 6
    WIDTH = 128
    POSITION_FREQS = 10
    TIME_FREQS = 6
    OUTPUT_DIM = 10


class DiffusionDefaults:
    """Toy conditional diffusion model."""

    TIMESTEPS = 200
    BETA_START = 1e-4
    BETA_END = 0.02
    BASE_WIDTH = 32
    BLOCKS = 4
    TIME_EMBED_DIM = 64
    TEXT_EMBED_DIM = 32
    VOCAB_SIZE = 64
    NULL_TEXT = 0
    # <V> lives at the top of the vocabulary; corpora never emit it
    V_TOKEN = VOCAB_SIZE - 1
    IMAGE_GUIDANCE = 1.5
    TEXT_GUIDANCE = 7.5
    DROPOUT_IMAGE = 0.05
    DROPOUT_TEXT = 0.05
    DROPOUT_BOTH = 0.05


class ScheduleDefaults:
    """Edit propagation schedule."""

    EDIT_PERIOD = 50
    STAGE1_MONOCULAR = 300
    STAGE1_MULTI_CAMERA = 100
    LAMBDA_DSSIM = 0.2
    LAMBDA_TEMPORAL = 0.001
    STAGE2_LR_SCALE = 0.5


def torch_dtype(precision: Optional[str] = None):
    """Map a precision mode to the torch dtype used for scene math."""
    import torch

    mode = precision or settings.precision
    return torch.float64 if mode == "wide" else torch.float32
