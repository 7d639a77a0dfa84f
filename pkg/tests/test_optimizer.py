import numpy as np
import pytest
import torch
from hypothesis import given, settings as hyp_settings, strategies as st

from factories import random_cloud, small_field
from src.splatting.optimizer import OptimizerConfig, SceneOptimizer, get_expon_lr_func
from src.splatting.scene import PARAMETER_NAMES
from src.utils.exceptions import NonFiniteError, ShapeMismatchError


def _grads(cloud, value=1.0):
    return {name: torch.full_like(p, value) for name, p in cloud.parameters().items()}


def test_zero_gradient_from_fresh_state_keeps_parameters():
    cloud = random_cloud(5)
    before = {k: v.detach().clone() for k, v in cloud.parameters().items()}
    opt = SceneOptimizer(cloud, None)
    opt.step(_grads(cloud, 0.0))
    for name, param in cloud.parameters().items():
        assert torch.equal(param.detach(), before[name]), name


def test_moments_decay_under_zero_gradient():
    cloud = random_cloud(4)
    opt = SceneOptimizer(cloud, None)
    opt.step(_grads(cloud, 1.0))
    first = opt.moments("opacity")[0].clone()
    opt.step(_grads(cloud, 0.0))
    assert torch.allclose(opt.moments("opacity")[0], 0.9 * first)


def test_first_step_moves_by_learning_rate():
    cloud = random_cloud(1)
    opt = SceneOptimizer(cloud, None, OptimizerConfig(opacity_lr=0.1))
    before = cloud._opacity.detach().clone()
    opt.step({"opacity": torch.ones(1, 1, dtype=torch.float64)})
    assert (cloud._opacity.detach() - before).item() == pytest.approx(-0.1, rel=1e-9)
    assert opt.step_count == 1


def test_moments_none_before_first_step():
    opt = SceneOptimizer(random_cloud(2), None)
    assert opt.moments("xyz") is None
    with pytest.raises(KeyError):
        opt.moments("field")


def test_gradient_shape_mismatch():
    cloud = random_cloud(3)
    opt = SceneOptimizer(cloud, None)
    with pytest.raises(ShapeMismatchError):
        opt.step({"xyz": torch.zeros(2, 3, dtype=torch.float64)})


def test_non_finite_gradient_names_the_group():
    cloud = random_cloud(3)
    before = cloud._xyz.detach().clone()
    opt = SceneOptimizer(cloud, None)
    grads = _grads(cloud)
    grads["xyz"][1, 2] = float("nan")
    with pytest.raises(NonFiniteError) as info:
        opt.step(grads)
    assert info.value.group == "xyz"
    assert torch.equal(cloud._xyz.detach(), before)


def test_expon_lr_endpoints():
    fn = get_expon_lr_func(1e-2, 1e-4, 100)
    assert fn(0) == pytest.approx(1e-2)
    assert fn(50) == pytest.approx(1e-3)
    assert fn(100) == pytest.approx(1e-4)
    assert fn(1000) == pytest.approx(1e-4)
    assert fn(-1) == 0.0
    assert get_expon_lr_func(0.5, 0.5, 10)(7) == 0.5


def test_group_names_and_learning_rates():
    field = small_field()
    opt = SceneOptimizer(random_cloud(3), field, scene_extent=2.0, lr_scale=0.5)
    assert opt.group_names == [*PARAMETER_NAMES, "field"]
    rates = opt.learning_rates()
    assert rates["xyz"] == pytest.approx(1.6e-4)
    assert rates["opacity"] == pytest.approx(0.025)
    assert rates["field"] == pytest.approx(0.8e-4)


def test_frozen_field_and_color():
    cloud = random_cloud(3)
    field = small_field()
    opt = SceneOptimizer(cloud, field, train_field=False, train_color=False)
    assert "field" not in opt.group_names and "color" not in opt.group_names
    assert not cloud._color.requires_grad
    assert all(not p.requires_grad for p in field.parameters())


def test_position_learning_rate_decays():
    opt = SceneOptimizer(random_cloud(2), None, OptimizerConfig(position_lr_final=1.6e-6, position_lr_max_steps=10))
    assert opt.update_learning_rate(0) == pytest.approx(1.6e-4)
    assert opt.update_learning_rate(10) == pytest.approx(1.6e-6)
    assert opt.learning_rates()["xyz"] == pytest.approx(1.6e-6)


operations = st.lists(
    st.one_of(
        st.tuples(st.just("cat"), st.integers(0, 4)),
        st.tuples(st.just("prune"), st.integers(0, 2 ** 16)),
    ),
    max_size=6,
)


@given(operations)
@hyp_settings(max_examples=30, deadline=None)
def test_row_edits_keep_parameters_and_moments_aligned(ops):
    n = 6
    cloud = random_cloud(n)
    with torch.no_grad():
        cloud._xyz[:, 0] = torch.arange(1, n + 1, dtype=torch.float64)
    opt = SceneOptimizer(cloud, None)
    tags = torch.arange(1, n + 1, dtype=torch.float64)
    opt.step({name: tags.reshape(-1, 1).expand_as(p).clone() for name, p in cloud.parameters().items()})

    ids = list(range(1, n + 1))
    moment_tags = list(range(1, n + 1))
    next_id = n + 1
    for op, arg in ops:
        if op == "cat":
            rows = {name: torch.zeros(arg, p.shape[1], dtype=torch.float64) for name, p in cloud.parameters().items()}
            rows["xyz"][:, 0] = torch.arange(next_id, next_id + arg, dtype=torch.float64)
            opt.cat_tensors(rows)
            ids += list(range(next_id, next_id + arg))
            moment_tags += [0] * arg
            next_id += arg
        else:
            keep = np.random.default_rng(arg).random(len(ids)) < 0.6
            opt.prune(torch.as_tensor(keep))
            ids = [i for i, k in zip(ids, keep) if k]
            moment_tags = [m for m, k in zip(moment_tags, keep) if k]

    params = cloud.parameters()
    assert torch.round(params["xyz"][:, 0].detach()).tolist() == ids
    expected = torch.tensor(moment_tags, dtype=torch.float64)
    for group in opt.optimizer.param_groups:
        name = group["name"]
        assert group["params"][0] is params[name]
        exp_avg, exp_avg_sq = opt.moments(name)
        assert exp_avg.shape == params[name].shape
        assert torch.allclose(exp_avg[:, 0], 0.1 * expected)
        assert torch.allclose(exp_avg_sq[:, 0], 0.001 * expected ** 2)
