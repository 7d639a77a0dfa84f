import math

import numpy as np
import pytest
import torch
from scipy import stats

from src.splatting.densify import SPLIT_SCALE_DIVISOR, DensifyConfig, densify_and_prune
from src.splatting.optimizer import SceneOptimizer
from src.splatting.renderer import GradBuffers
from src.splatting.scene import GaussianCloud


def _cloud(n, log_scale, opacity=3.0):
    return GaussianCloud.from_arrays(
        np.zeros((n, 3)), np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)), np.full((n, 3), log_scale),
        np.full(n, opacity), np.zeros((n, 3)), dtype=torch.float64,
    )


def _stats(values):
    values = torch.as_tensor(values, dtype=torch.float64)
    buffers = GradBuffers.zeros(len(values), torch.float64)
    buffers.positional_grad_sum = values.clone()
    buffers.positional_grad_count = torch.ones_like(values)
    return buffers


def _generator(seed=0):
    return torch.Generator().manual_seed(seed)


def test_prune_only_removes_transparent_gaussians():
    cloud = GaussianCloud.from_arrays(
        np.arange(12, dtype=float).reshape(4, 3), np.tile([1.0, 0, 0, 0], (4, 1)), np.full((4, 3), -3.0),
        [3.0, -8.0, 2.0, -9.0], np.zeros((4, 3)), dtype=torch.float64,
    )
    result = densify_and_prune(cloud, _stats([0.0] * 4), DensifyConfig(), 1.0)
    assert (result.cloned, result.split, result.pruned, result.count) == (0, 0, 2, 2)
    assert cloud._xyz[:, 0].tolist() == [0.0, 6.0]


def test_clone_adds_one_copy_of_small_gaussians():
    cloud = _cloud(5, log_scale=math.log(1e-3))
    result = densify_and_prune(cloud, _stats([1.0, 0.0, 1.0, 0.0, 0.0]), DensifyConfig(), 1.0, generator=_generator())
    assert (result.cloned, result.split, result.count) == (2, 0, 7)
    assert torch.allclose(cloud._scaling[5:], torch.full((2, 3), math.log(1e-3), dtype=torch.float64))
    assert cloud._xyz[5:].abs().max() < 0.01


def test_split_replaces_parent_with_shrunk_children():
    cloud = _cloud(4, log_scale=math.log(0.5))
    result = densify_and_prune(cloud, _stats([1.0, 0.0, 0.0, 0.0]), DensifyConfig(), 1.0, generator=_generator())
    assert (result.cloned, result.split, result.pruned, result.count) == (0, 1, 0, 5)
    assert SPLIT_SCALE_DIVISOR == 1.6
    expected = math.log(0.5) - math.log(1.6)
    assert torch.allclose(cloud._scaling[3:], torch.full((2, 3), expected, dtype=torch.float64))
    assert torch.allclose(cloud._scaling[:3], torch.full((3, 3), math.log(0.5), dtype=torch.float64))


def test_split_children_sample_the_parent_distribution():
    n = 10_000
    cloud = _cloud(n, log_scale=math.log(0.5))
    cfg = DensifyConfig(max_gaussians=100_000)
    result = densify_and_prune(cloud, _stats(np.ones(n)), cfg, 1.0, generator=_generator(3))
    assert result.count == 2 * n
    x = cloud._xyz[:, 0].detach().numpy()
    assert stats.kstest(x, "norm", args=(0.0, 0.5)).pvalue > 0.01


def test_growth_past_cap_is_skipped():
    cloud = _cloud(4, log_scale=math.log(0.5))
    result = densify_and_prune(cloud, _stats([1.0] * 4), DensifyConfig(max_gaussians=5), 1.0, generator=_generator())
    assert result.skipped
    assert (result.cloned, result.split, result.count) == (0, 0, 4)


def test_new_rows_start_with_zero_moments_and_stats_are_resized():
    cloud = _cloud(3, log_scale=math.log(1e-3))
    opt = SceneOptimizer(cloud, None)
    opt.step({name: torch.ones_like(p) for name, p in cloud.parameters().items()})
    grad_stats = _stats([1.0, 0.0, 0.0])
    densify_and_prune(cloud, grad_stats, DensifyConfig(), 1.0, optimizer=opt, generator=_generator())
    exp_avg, exp_avg_sq = opt.moments("xyz")
    assert exp_avg.shape == (4, 3)
    assert torch.equal(exp_avg[3], torch.zeros(3, dtype=torch.float64))
    assert torch.equal(exp_avg_sq[3], torch.zeros(3, dtype=torch.float64))
    assert exp_avg[0].abs().sum() > 0
    assert opt.optimizer.param_groups[0]["params"][0] is cloud._xyz
    assert grad_stats.positional_grad_sum.shape == (4,)
    assert grad_stats.positional_grad_count.sum() == 0


def test_clone_offsets_are_deterministic_for_a_seed():
    a, b = _cloud(6, math.log(1e-3)), _cloud(6, math.log(1e-3))
    for cloud in (a, b):
        densify_and_prune(cloud, _stats([1.0] * 6), DensifyConfig(), 1.0, generator=_generator(9))
    assert torch.equal(a._xyz, b._xyz)


@pytest.mark.parametrize("threshold", [0.5, 2.0])
def test_threshold_is_inclusive(threshold):
    cloud = _cloud(2, log_scale=math.log(1e-3))
    result = densify_and_prune(cloud, _stats([0.5, 0.5]), DensifyConfig(grad_threshold=threshold), 1.0,
                               generator=_generator())
    assert result.cloned == (2 if threshold == 0.5 else 0)
