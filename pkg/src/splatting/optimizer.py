"""
Adam over the scene's named parameter groups.

One group per raw Gaussian array (``xyz``, ``rotation``, ``scaling``,
``opacity``, ``color``) plus ``field`` for the deformation MLP. Densification
edits the Gaussian groups row-wise; the moment buffers follow in lockstep.
"""

from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from src.splatting.scene import PARAMETER_NAMES, DeformationField, GaussianCloud
from src.utils.exceptions import NonFiniteError, ShapeMismatchError
from src.utils.logger import get_logger

logger = get_logger(__name__)

FIELD_GROUP = "field"


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    position_lr: float = Field(1.6e-4, ge=0, description="Scaled by scene_extent")
    position_lr_final: Optional[float] = Field(None, ge=0, description="Exponential decay target (scaled)")
    position_lr_max_steps: int = Field(30000, ge=1)
    rotation_lr: float = Field(1e-3, ge=0)
    scaling_lr: float = Field(5e-3, ge=0)
    opacity_lr: float = Field(5e-2, ge=0)
    color_lr: float = Field(2.5e-3, ge=0)
    deformation_lr: float = Field(1.6e-4, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-15, gt=0)


def get_expon_lr_func(lr_init: float, lr_final: float, max_steps: int):
    """Log-linear interpolation from ``lr_init`` to ``lr_final`` over ``max_steps``."""

    def helper(step: int) -> float:
        if lr_init == lr_final:
            return lr_init
        if step < 0 or (lr_init == 0.0 and lr_final == 0.0):
            return 0.0
        t = np.clip(step / max_steps, 0, 1)
        return float(np.exp(np.log(lr_init) * (1 - t) + np.log(lr_final) * t))

    return helper


def _check_finite_grads(optimizer: torch.optim.Optimizer) -> None:
    for group in optimizer.param_groups:
        for param in group["params"]:
            if param.grad is not None and not bool(torch.isfinite(param.grad).all()):
                raise NonFiniteError(f"non-finite gradient in parameter group {group['name']!r}", group=group["name"])


def adam_step(
    optimizer: torch.optim.Adam,
    grads: Optional[Mapping[str, Union[torch.Tensor, Sequence[torch.Tensor]]]] = None,
) -> None:
    """Apply one bias-corrected Adam update.

    ``grads`` maps group names to gradients (a sequence for multi-tensor
    groups); when omitted the ``.grad`` fields already set by backward are used.
    """
    if grads is not None:
        for group in optimizer.param_groups:
            if group["name"] not in grads:
                continue
            values = grads[group["name"]]
            values = [values] if torch.is_tensor(values) else list(values)
            if len(values) != len(group["params"]):
                raise ShapeMismatchError(f"group {group['name']!r} expects {len(group['params'])} gradients")
            for param, g in zip(group["params"], values):
                if g.shape != param.shape:
                    raise ShapeMismatchError(
                        f"gradient for {group['name']!r} has shape {tuple(g.shape)}, parameter {tuple(param.shape)}"
                    )
                param.grad = g.detach().to(param.dtype)
    _check_finite_grads(optimizer)
    optimizer.step()


class SceneOptimizer:
    """Adam state over a Gaussian cloud and (optionally) its deformation field."""

    def __init__(
        self,
        cloud: GaussianCloud,
        field: Optional[DeformationField],
        config: Optional[OptimizerConfig] = None,
        scene_extent: float = 1.0,
        lr_scale: float = 1.0,
        train_cloud: bool = True,
        train_field: bool = True,
        train_color: bool = True,
    ):
        self.cloud = cloud
        self.field = field
        self.config = config or OptimizerConfig()
        self.scene_extent = scene_extent
        self.lr_scale = lr_scale
        self.step_count = 0

        cfg = self.config
        base_lrs = {
            "xyz": cfg.position_lr * scene_extent,
            "rotation": cfg.rotation_lr,
            "scaling": cfg.scaling_lr,
            "opacity": cfg.opacity_lr,
            "color": cfg.color_lr,
        }
        groups = []
        trained_names = [n for n in PARAMETER_NAMES if train_cloud and (train_color or n != "color")]
        for name in PARAMETER_NAMES:
            getattr(cloud, f"_{name}").requires_grad_(name in trained_names)
        for name in trained_names:
            groups.append({"params": [getattr(cloud, f"_{name}")], "lr": base_lrs[name] * lr_scale, "name": name})

        if field is not None:
            field.requires_grad_(train_field)
            if train_field:
                groups.append(
                    {"params": list(field.parameters()), "lr": cfg.deformation_lr * lr_scale, "name": FIELD_GROUP}
                )

        self.optimizer = torch.optim.Adam(groups, lr=0.0, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)

        position_lr = base_lrs["xyz"] * lr_scale
        final = position_lr if cfg.position_lr_final is None else cfg.position_lr_final * scene_extent * lr_scale
        self.xyz_scheduler = get_expon_lr_func(position_lr, final, cfg.position_lr_max_steps)

    @property
    def group_names(self):
        return [group["name"] for group in self.optimizer.param_groups]

    def learning_rates(self) -> Dict[str, float]:
        return {group["name"]: group["lr"] for group in self.optimizer.param_groups}

    def update_learning_rate(self, iteration: int) -> Optional[float]:
        for group in self.optimizer.param_groups:
            if group["name"] == "xyz":
                group["lr"] = self.xyz_scheduler(iteration)
                return group["lr"]
        return None

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=True)

    def step(self, grads=None) -> None:
        adam_step(self.optimizer, grads)
        self.step_count += 1

    def moments(self, name: str):
        """(exp_avg, exp_avg_sq) of a single-tensor group, or None before its first step."""
        for group in self.optimizer.param_groups:
            if group["name"] == name:
                state = self.optimizer.state.get(group["params"][0])
                if not state:
                    return None
                return state["exp_avg"], state["exp_avg_sq"]
        raise KeyError(name)

    # row edits on the Gaussian groups
    def cat_tensors(self, tensors: Dict[str, torch.Tensor]) -> None:
        """Append rows to every Gaussian array; new moments start at zero."""
        new_params = {}
        for group in self.optimizer.param_groups:
            if group["name"] == FIELD_GROUP:
                continue
            extension = tensors[group["name"]]
            param = group["params"][0]
            stored_state = self.optimizer.state.get(param, None)
            new_param = nn.Parameter(torch.cat((param.detach(), extension), dim=0).requires_grad_(True))
            if stored_state is not None:
                stored_state["exp_avg"] = torch.cat((stored_state["exp_avg"], torch.zeros_like(extension)), dim=0)
                stored_state["exp_avg_sq"] = torch.cat(
                    (stored_state["exp_avg_sq"], torch.zeros_like(extension)), dim=0
                )
                del self.optimizer.state[param]
                self.optimizer.state[new_param] = stored_state
            group["params"][0] = new_param
            new_params[group["name"]] = new_param

        for name in PARAMETER_NAMES:
            if name not in new_params:
                current = getattr(self.cloud, f"_{name}")
                new_params[name] = nn.Parameter(
                    torch.cat((current.detach(), tensors[name]), dim=0), requires_grad=current.requires_grad
                )
        self.cloud.replace_parameters(new_params)

    def prune(self, keep: torch.Tensor) -> None:
        """Keep only rows where ``keep`` is True, in every Gaussian array and moment buffer."""
        new_params = {}
        for group in self.optimizer.param_groups:
            if group["name"] == FIELD_GROUP:
                continue
            param = group["params"][0]
            stored_state = self.optimizer.state.get(param, None)
            new_param = nn.Parameter(param.detach()[keep].requires_grad_(True))
            if stored_state is not None:
                stored_state["exp_avg"] = stored_state["exp_avg"][keep]
                stored_state["exp_avg_sq"] = stored_state["exp_avg_sq"][keep]
                del self.optimizer.state[param]
                self.optimizer.state[new_param] = stored_state
            group["params"][0] = new_param
            new_params[group["name"]] = new_param

        for name in PARAMETER_NAMES:
            if name not in new_params:
                current = getattr(self.cloud, f"_{name}")
                new_params[name] = nn.Parameter(current.detach()[keep], requires_grad=current.requires_grad)
        self.cloud.replace_parameters(new_params)
