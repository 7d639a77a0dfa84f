"""Linear-beta DDPM noise schedule, forward diffusion and strided ancestral steps."""

from typing import List, Union

import numpy as np
import torch

from config.settings import DiffusionDefaults
from src.utils.exceptions import InvalidArgumentError


class NoiseSchedule:
    """beta_t linear from ``beta_start`` to ``beta_end``; timesteps are 1-based (1..T)."""

    def __init__(
        self,
        timesteps: int = DiffusionDefaults.TIMESTEPS,
        beta_start: float = DiffusionDefaults.BETA_START,
        beta_end: float = DiffusionDefaults.BETA_END,
    ):
        if timesteps < 1:
            raise InvalidArgumentError("schedule needs at least one timestep")
        self.timesteps = timesteps
        self.beta = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        self.alpha = 1.0 - self.beta
        self.alpha_bar = torch.cumprod(self.alpha, dim=0)

    def alpha_bar_at(self, t: Union[int, torch.Tensor]) -> torch.Tensor:
        """alpha_bar for 1-based ``t``; t = 0 maps to 1 (clean data)."""
        t = torch.as_tensor(t)
        padded = torch.cat([torch.ones(1, dtype=torch.float64), self.alpha_bar])
        return padded[t.long()]

    def check_timestep(self, t: Union[int, torch.Tensor]) -> None:
        t = torch.as_tensor(t)
        if bool((t < 1).any()) or bool((t > self.timesteps).any()):
            raise InvalidArgumentError(f"timestep outside [1, {self.timesteps}]")

    def sample_timesteps(self, batch: int, generator: torch.Generator = None) -> torch.Tensor:
        return torch.randint(1, self.timesteps + 1, (batch,), generator=generator)

    def sampling_timesteps(self, steps: int = None) -> List[int]:
        """Descending timesteps for a (possibly strided) sampler; always starts at T and ends at 1."""
        steps = self.timesteps if steps is None else steps
        if steps < 1:
            raise InvalidArgumentError("sampler needs at least one step")
        steps = min(steps, self.timesteps)
        grid = np.unique(np.round(np.linspace(1, self.timesteps, steps)).astype(int))
        return [int(t) for t in grid[::-1]]


def diffuse_with_alpha_bar(x0: torch.Tensor, alpha_bar, eps: torch.Tensor) -> torch.Tensor:
    """z = sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps."""
    alpha_bar = torch.as_tensor(alpha_bar, dtype=x0.dtype, device=x0.device)
    while alpha_bar.dim() < x0.dim():
        alpha_bar = alpha_bar.unsqueeze(-1)
    return alpha_bar.sqrt() * x0 + (1 - alpha_bar).sqrt() * eps


def forward_diffuse(schedule: NoiseSchedule, x0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """Sample q(z_t | x0) with the given noise; ``t`` is a scalar or a (B,) tensor."""
    schedule.check_timestep(t)
    return diffuse_with_alpha_bar(x0, schedule.alpha_bar_at(t), eps)


def ancestral_step(
    schedule: NoiseSchedule,
    z: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    noise: torch.Tensor,
) -> torch.Tensor:
    """One DDPM posterior step from ``t`` to ``t_prev`` (respaced when t_prev < t - 1)."""
    ab_t = float(schedule.alpha_bar_at(t))
    ab_prev = float(schedule.alpha_bar_at(t_prev))
    beta = 1.0 - ab_t / ab_prev

    x0_hat = (z - (1 - ab_t) ** 0.5 * eps_hat) / ab_t ** 0.5
    mean = (ab_prev ** 0.5 * beta / (1 - ab_t)) * x0_hat + ((1 - beta) ** 0.5 * (1 - ab_prev) / (1 - ab_t)) * z
    if t_prev == 0:
        return mean
    var = beta * (1 - ab_prev) / (1 - ab_t)
    return mean + var ** 0.5 * noise
