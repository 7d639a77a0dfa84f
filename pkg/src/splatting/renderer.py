"""
Tile-parallel differentiable rasterizer.

The compositing kernel runs on numpy arrays inside a torch autograd Function
with a hand-derived backward. Everything upstream (deformation, activations,
covariance, projection) stays in torch autograd, so gradients chain from the
image back to every raw parameter.

Per pixel the splats are visited in one global depth order (stable, ties by
source index), so tiling never changes the result: for each tile the kernel
evaluates all overlapping splats at once and reduces them with sequential
cumulative sums/products along the depth axis.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from config.settings import RenderConfig, settings
from src.splatting.geometry import Camera, project_gaussians
from src.splatting.scene import DeformedGaussians, SceneSnapshot, deformed_gaussians
from src.utils.exceptions import InvalidArgumentError, NonFiniteError, ShapeMismatchError
from src.utils.logger import get_logger
from src.utils.monitoring import render_duration

logger = get_logger(__name__)


class SplatPrimitives(NamedTuple):
    """Screen-space splats in global depth order (numpy, kernel precision)."""

    means2d: np.ndarray  # (M, 2)
    conic: np.ndarray  # (M, 3) packed a, b, c
    depth: np.ndarray  # (M,)
    colors: np.ndarray  # (M, 3)
    opacities: np.ndarray  # (M,)
    radius: np.ndarray  # (M,) conservative pixel bound
    source_index: np.ndarray  # (M,) int64 index into the cloud


@dataclass
class RasterPlan:
    width: int
    height: int
    background: np.ndarray
    splats: SplatPrimitives
    tiles: List[Tuple[np.ndarray, np.ndarray, np.ndarray]]  # (splat ids, pixel y, pixel x)
    workers: int = 1


@dataclass
class RenderOutput:
    image: torch.Tensor  # (H, W, 3)
    transmittance: torch.Tensor  # (H, W)
    contributors: torch.Tensor  # (H, W) int64
    means2d: torch.Tensor  # (N, 2) projected means, part of the autograd graph
    visible: torch.Tensor  # (N,) bool, contributed to at least one pixel
    camera: Camera
    plan: RasterPlan = field(repr=False)


def _check_finite(gaussians: DeformedGaussians) -> None:
    parts = [
        gaussians.means, gaussians.rotations, gaussians.scales,
        gaussians.opacities.reshape(-1, 1), gaussians.colors,
    ]
    bad = torch.zeros(gaussians.count, dtype=torch.bool, device=gaussians.means.device)
    for part in parts:
        bad |= ~torch.isfinite(part.detach()).all(dim=-1)
    if bool(bad.any()):
        index = int(torch.nonzero(bad)[0, 0])
        raise NonFiniteError(f"Gaussian {index} has a non-finite parameter", index=index)


def _background_array(background, dtype) -> np.ndarray:
    if background is None:
        return np.zeros(3, dtype=dtype)
    if torch.is_tensor(background):
        background = background.detach().cpu().numpy()
    bg = np.asarray(background, dtype=dtype).reshape(-1)
    if bg.shape != (3,):
        raise ShapeMismatchError("background must be an RGB triple")
    return bg


def _bound_radius(cov2d: np.ndarray, opacities: np.ndarray) -> np.ndarray:
    """Pixel radius beyond which a splat's alpha is below the skip threshold."""
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    with np.errstate(divide="ignore"):
        extent = np.maximum(2.0 * np.log(opacities / RenderConfig.ALPHA_MIN), 0.0)
    return np.sqrt(lam_max * extent) + RenderConfig.BOUND_MARGIN


def build_plan(
    means2d: torch.Tensor,
    cov2d: torch.Tensor,
    conic: torch.Tensor,
    depth: torch.Tensor,
    valid: torch.Tensor,
    colors: torch.Tensor,
    opacities: torch.Tensor,
    cam: Camera,
    background=None,
    workers: Optional[int] = None,
) -> RasterPlan:
    """Depth-sort, cull off-screen splats and bin them into 16x16 tiles."""
    dtype = means2d.detach().cpu().numpy().dtype
    ts = RenderConfig.TILE_SIZE
    width, height = cam.width, cam.height

    mu = means2d.detach().cpu().numpy()
    cov = cov2d.detach().cpu().numpy()
    opac = opacities.detach().cpu().numpy()
    radius = _bound_radius(cov, opac) if len(opac) else np.zeros(0, dtype=dtype)

    keep = valid.detach().cpu().numpy().copy()
    keep &= (mu[:, 0] + radius >= 0) & (mu[:, 0] - radius <= width - 1)
    keep &= (mu[:, 1] + radius >= 0) & (mu[:, 1] - radius <= height - 1)

    candidates = np.nonzero(keep)[0]
    order = candidates[np.argsort(depth.detach().cpu().numpy()[candidates], kind="stable")]
    splats = SplatPrimitives(
        means2d=mu[order],
        conic=conic.detach().cpu().numpy()[order],
        depth=depth.detach().cpu().numpy()[order],
        colors=colors.detach().cpu().numpy()[order],
        opacities=opac[order],
        radius=radius[order],
        source_index=order.astype(np.int64),
    )

    tiles = []
    xmin = splats.means2d[:, 0] - splats.radius
    xmax = splats.means2d[:, 0] + splats.radius
    ymin = splats.means2d[:, 1] - splats.radius
    ymax = splats.means2d[:, 1] + splats.radius
    for y0 in range(0, height, ts):
        y1 = min(y0 + ts, height)
        for x0 in range(0, width, ts):
            x1 = min(x0 + ts, width)
            ids = np.nonzero((xmax >= x0) & (xmin <= x1 - 1) & (ymax >= y0) & (ymin <= y1 - 1))[0]
            py, px = np.meshgrid(np.arange(y0, y1), np.arange(x0, x1), indexing="ij")
            tiles.append((ids, py.ravel(), px.ravel()))

    plan = RasterPlan(
        width=width,
        height=height,
        background=_background_array(background, dtype),
        splats=splats,
        tiles=tiles,
        workers=workers or settings.render_workers,
    )
    return plan


class _TileState(NamedTuple):
    dx: np.ndarray
    dy: np.ndarray
    gauss: np.ndarray
    alpha: np.ndarray
    clamped: np.ndarray
    valid: np.ndarray
    t_before: np.ndarray
    t_final: np.ndarray
    weight: np.ndarray


def _tile_state(plan: RasterPlan, ids: np.ndarray, py: np.ndarray, px: np.ndarray) -> _TileState:
    s = plan.splats
    dtype = s.means2d.dtype
    mu = s.means2d[ids]
    dx = px.astype(dtype)[None, :] - mu[:, 0:1]
    dy = py.astype(dtype)[None, :] - mu[:, 1:2]
    a, b, c = s.conic[ids, 0:1], s.conic[ids, 1:2], s.conic[ids, 2:3]

    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    gauss = np.exp(power)
    raw = s.opacities[ids][:, None] * gauss
    alpha = np.minimum(dtype.type(RenderConfig.ALPHA_MAX), raw)
    clamped = raw > RenderConfig.ALPHA_MAX
    skip = alpha < RenderConfig.ALPHA_MIN

    one_minus = 1 - np.where(skip, 0, alpha).astype(dtype)
    t_after = np.cumprod(one_minus, axis=0)
    done = (t_after < RenderConfig.TRANSMITTANCE_MIN) & ~skip
    valid = (np.cumsum(done, axis=0) == 0) & ~skip

    t_before = np.concatenate([np.ones((1, len(px)), dtype=dtype), t_after[:-1]], axis=0)
    t_final = np.cumprod(np.where(valid, one_minus, 1).astype(dtype), axis=0)[-1]
    weight = np.where(valid, alpha * t_before, 0).astype(dtype)
    return _TileState(dx, dy, gauss, alpha, clamped, valid, t_before, t_final, weight)


def _forward_tile(plan: RasterPlan, tile):
    ids, py, px = tile
    dtype = plan.splats.means2d.dtype
    if len(ids) == 0:
        color = np.broadcast_to(plan.background, (len(px), 3)).astype(dtype)
        return color, np.ones(len(px), dtype=dtype), np.zeros(len(px), dtype=np.int64), ids
    st = _tile_state(plan, ids, py, px)
    colors = plan.splats.colors[ids]
    accum = np.cumsum(st.weight[:, :, None] * colors[:, None, :], axis=0)[-1]
    color = accum + st.t_final[:, None] * plan.background
    hits = ids[st.valid.any(axis=1)]
    return color, st.t_final, st.valid.sum(axis=0), hits


def _backward_tile(plan: RasterPlan, tile, grad_image: np.ndarray):
    ids, py, px = tile
    if len(ids) == 0:
        return None
    s = plan.splats
    st = _tile_state(plan, ids, py, px)
    g = grad_image[py, px]  # (P, 3)
    colors = s.colors[ids]
    a, b, c = s.conic[ids, 0:1], s.conic[ids, 1:2], s.conic[ids, 2:3]

    d_color = st.weight @ g
    cg = colors @ g.T
    wcg = st.weight * cg
    rc = np.cumsum(wcg[::-1], axis=0)[::-1]
    suffix = np.concatenate([rc[1:], np.zeros((1, len(px)), dtype=rc.dtype)], axis=0)
    bg_g = g @ plan.background

    d_alpha = st.t_before * cg - (suffix + st.t_final[None, :] * bg_g[None, :]) / (1 - st.alpha)
    d_alpha = np.where(st.valid & ~st.clamped, d_alpha, 0)

    d_opacity = (d_alpha * st.gauss).sum(axis=1)
    d_power = d_alpha * st.alpha
    dx, dy = st.dx, st.dy
    d_conic = np.stack(
        [
            (d_power * (-0.5 * dx * dx)).sum(axis=1),
            (d_power * (-dx * dy)).sum(axis=1),
            (d_power * (-0.5 * dy * dy)).sum(axis=1),
        ],
        axis=1,
    )
    d_mean = np.stack(
        [(d_power * (a * dx + b * dy)).sum(axis=1), (d_power * (c * dy + b * dx)).sum(axis=1)],
        axis=1,
    )
    return ids, d_mean, d_conic, d_color, d_opacity


def _map_tiles(plan: RasterPlan, fn, *args):
    if plan.workers <= 1 or len(plan.tiles) <= 1:
        return [fn(plan, tile, *args) for tile in plan.tiles]
    with ThreadPoolExecutor(max_workers=plan.workers) as pool:
        return list(pool.map(lambda tile: fn(plan, tile, *args), plan.tiles))


def composite(plan: RasterPlan):
    """Run the forward kernel; returns (image, transmittance, contributors, hit source ids)."""
    dtype = plan.splats.means2d.dtype
    image = np.empty((plan.height, plan.width, 3), dtype=dtype)
    trans = np.empty((plan.height, plan.width), dtype=dtype)
    count = np.zeros((plan.height, plan.width), dtype=np.int64)
    hit = np.zeros(len(plan.splats.source_index), dtype=bool)

    for tile, (color, t_final, n, hits) in zip(plan.tiles, _map_tiles(plan, _forward_tile)):
        _, py, px = tile
        image[py, px] = color
        trans[py, px] = t_final
        count[py, px] = n
        hit[hits] = True
    return image, trans, count, plan.splats.source_index[hit]


class _CompositeSplats(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means2d, conic, colors, opacities, plan: RasterPlan):
        image, trans, count, hit_sources = composite(plan)
        ctx.plan = plan
        ctx.shapes = (means2d.shape, conic.shape, colors.shape, opacities.shape)
        dtype, device = means2d.dtype, means2d.device

        visible = torch.zeros(means2d.shape[0], dtype=torch.bool, device=device)
        visible[torch.from_numpy(hit_sources).to(device)] = True
        outputs = (
            torch.from_numpy(image).to(device=device, dtype=dtype),
            torch.from_numpy(trans).to(device=device, dtype=dtype),
            torch.from_numpy(count).to(device),
            visible,
        )
        ctx.mark_non_differentiable(*outputs[1:])
        return outputs

    @staticmethod
    def backward(ctx, grad_image, *_):
        plan = ctx.plan
        mean_shape, conic_shape, color_shape, opacity_shape = ctx.shapes
        device, dtype = grad_image.device, grad_image.dtype
        g = grad_image.detach().cpu().numpy().astype(plan.splats.means2d.dtype)

        m = len(plan.splats.source_index)
        d_mean = np.zeros((m, 2), dtype=g.dtype)
        d_conic = np.zeros((m, 3), dtype=g.dtype)
        d_color = np.zeros((m, 3), dtype=g.dtype)
        d_opacity = np.zeros(m, dtype=g.dtype)
        # fixed tile order keeps the reduction independent of the worker count
        for part in _map_tiles(plan, _backward_tile, g):
            if part is None:
                continue
            ids, dm, dc, dcol, dop = part
            np.add.at(d_mean, ids, dm)
            np.add.at(d_conic, ids, dc)
            np.add.at(d_color, ids, dcol)
            np.add.at(d_opacity, ids, dop)

        def scatter(values, shape):
            out = torch.zeros(shape, dtype=dtype, device=device)
            out[torch.from_numpy(plan.splats.source_index).to(device)] = torch.from_numpy(values).to(
                device=device, dtype=dtype
            )
            return out

        return (
            scatter(d_mean, mean_shape),
            scatter(d_conic, conic_shape),
            scatter(d_color, color_shape),
            scatter(d_opacity, opacity_shape),
            None,
        )


def rasterize(
    gaussians: DeformedGaussians,
    cam: Camera,
    background=None,
    workers: Optional[int] = None,
) -> RenderOutput:
    """Render a Gaussian set; the image stays attached to the autograd graph."""
    _check_finite(gaussians)
    with render_duration.time():
        cov3d = gaussians.covariances()
        proj = project_gaussians(gaussians.means, cov3d, cam)
        if proj.means2d.requires_grad:
            proj.means2d.retain_grad()
        plan = build_plan(
            proj.means2d, proj.cov2d, proj.conic, proj.depth, proj.valid,
            gaussians.colors, gaussians.opacities, cam, background, workers,
        )
        image, trans, count, visible = _CompositeSplats.apply(
            proj.means2d, proj.conic, gaussians.colors, gaussians.opacities, plan
        )
    return RenderOutput(
        image=image,
        transmittance=trans,
        contributors=count,
        means2d=proj.means2d,
        visible=visible,
        camera=cam,
        plan=plan,
    )


def render_at_time(scene: SceneSnapshot, t: float, cam: Camera, background=None, workers=None) -> RenderOutput:
    return rasterize(deformed_gaussians(scene.cloud, scene.field, t), cam, background, workers)


@dataclass
class GradBuffers:
    """Per-parameter gradients plus screen-space positional-gradient statistics."""

    grads: Dict[str, torch.Tensor]
    positional_grad_sum: torch.Tensor
    positional_grad_count: torch.Tensor

    @classmethod
    def zeros(cls, n: int, dtype=torch.float32, device="cpu") -> "GradBuffers":
        return cls(
            grads={},
            positional_grad_sum=torch.zeros(n, dtype=dtype, device=device),
            positional_grad_count=torch.zeros(n, dtype=dtype, device=device),
        )

    def accumulate(self, means2d_grad: torch.Tensor, visible: torch.Tensor, width: int, height: int) -> None:
        """Add the NDC-scaled norm of each visible Gaussian's mean gradient."""
        if means2d_grad is None:
            return
        scale = torch.tensor([width * 0.5, height * 0.5], dtype=means2d_grad.dtype, device=means2d_grad.device)
        norms = torch.linalg.norm(means2d_grad.detach() * scale, dim=-1)
        self.positional_grad_sum[visible] += norms[visible].to(self.positional_grad_sum.dtype)
        self.positional_grad_count[visible] += 1

    def mean_positional_gradient(self) -> torch.Tensor:
        mean = self.positional_grad_sum / self.positional_grad_count
        return torch.nan_to_num(mean, nan=0.0)

    def reset(self, n: Optional[int] = None) -> None:
        n = self.positional_grad_sum.shape[0] if n is None else n
        kw = {"dtype": self.positional_grad_sum.dtype, "device": self.positional_grad_sum.device}
        self.positional_grad_sum = torch.zeros(n, **kw)
        self.positional_grad_count = torch.zeros(n, **kw)


def rasterize_backward(
    render: RenderOutput,
    grad_image: torch.Tensor,
    parameters: Mapping[str, torch.Tensor],
    buffers: Optional[GradBuffers] = None,
    retain_graph: bool = False,
) -> GradBuffers:
    """Gradients of <render.image, grad_image> with respect to ``parameters``.

    Parameters the image does not depend on get zero gradients. When
    ``buffers`` is given, its positional statistics are accumulated in place.
    """
    if tuple(grad_image.shape) != tuple(render.image.shape):
        raise ShapeMismatchError(
            f"grad_image shape {tuple(grad_image.shape)} != image shape {tuple(render.image.shape)}"
        )
    names = list(parameters)
    inputs = [parameters[name] for name in names]
    if render.means2d.requires_grad:
        inputs.append(render.means2d)
    if not render.image.requires_grad:
        raise InvalidArgumentError("render is detached from the autograd graph")

    raw = torch.autograd.grad(
        render.image, inputs, grad_outputs=grad_image, retain_graph=retain_graph, allow_unused=True
    )
    grads = {
        name: torch.zeros_like(parameters[name]) if g is None else g
        for name, g in zip(names, raw)
    }
    if buffers is None:
        buffers = GradBuffers.zeros(render.means2d.shape[0], render.means2d.dtype, render.means2d.device)
    buffers.grads = grads
    if render.means2d.requires_grad:
        mean_grad = raw[-1] if raw[-1] is not None else torch.zeros_like(render.means2d)
        buffers.accumulate(mean_grad, render.visible, render.camera.width, render.camera.height)
    return buffers


def pixel_contributors(render: RenderOutput, x: int, y: int) -> List[Tuple[int, float, float]]:
    """(source_index, alpha, transmittance before) of every splat composited at pixel (x, y)."""
    plan = render.plan
    if not (0 <= x < plan.width and 0 <= y < plan.height):
        raise InvalidArgumentError(f"pixel ({x}, {y}) outside the image")
    ts = RenderConfig.TILE_SIZE
    tiles_x = (plan.width + ts - 1) // ts
    ids, _, _ = plan.tiles[(y // ts) * tiles_x + x // ts]
    if len(ids) == 0:
        return []
    st = _tile_state(plan, ids, np.array([y]), np.array([x]))
    rows = np.nonzero(st.valid[:, 0])[0]
    return [
        (int(plan.splats.source_index[ids[k]]), float(st.alpha[k, 0]), float(st.t_before[k, 0]))
        for k in rows
    ]


def dump_contributors(
    render: RenderOutput,
    path: Union[str, Path],
    pixels: Optional[Sequence[Tuple[int, int]]] = None,
) -> None:
    """Write the per-pixel contributor lists as text (format in docs/FORMATS.md)."""
    plan = render.plan
    if pixels is None:
        pixels = [(x, y) for y in range(plan.height) for x in range(plan.width)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# contributors v1 width={plan.width} height={plan.height}\n")
        for x, y in pixels:
            entries = pixel_contributors(render, x, y)
            f.write(f"pixel {x} {y} {len(entries)}\n")
            for index, alpha, trans in entries:
                f.write(f"  {index} {alpha!r} {trans!r}\n")
    logger.info("Contributor dump written", path=str(path), pixels=len(pixels))
