"""Scene snapshot persistence on top of the section container."""

from pathlib import Path
from typing import Union

import numpy as np
import torch

from src.splatting.scene import PARAMETER_NAMES, DeformationField, GaussianCloud, SceneSnapshot
from src.utils.container import read_container, write_container
from src.utils.exceptions import SnapshotFormatError
from src.utils.logger import get_logger

logger = get_logger(__name__)

SNAPSHOT_KIND = "scene"


def save_snapshot(scene: SceneSnapshot, path: Union[str, Path]) -> None:
    """Write cloud parameters, deformation weights and metadata.

    Section order: ``meta``, ``cloud/<name>`` for each raw parameter, then
    ``field/<name>`` for each deformation tensor in registration order.
    """
    meta = {
        "scene_extent": scene.scene_extent,
        "frame_count": scene.frame_count,
        "time_scale": scene.time_scale,
        "num_gaussians": scene.cloud.num_gaussians,
        "dtype": str(scene.cloud.dtype).replace("torch.", ""),
        "field": scene.field.config(),
        "metadata": scene.metadata,
    }
    sections = {"meta": meta}
    for name, tensor in scene.cloud.parameters().items():
        sections[f"cloud/{name}"] = tensor.detach().cpu().numpy()
    for name, tensor in scene.field.state_dict().items():
        sections[f"field/{name}"] = tensor.detach().cpu().numpy()

    write_container(path, SNAPSHOT_KIND, sections)
    logger.info("Snapshot saved", path=str(path), gaussians=scene.cloud.num_gaussians)


def load_snapshot(path: Union[str, Path], device: str = "cpu") -> SceneSnapshot:
    sections = read_container(path, expected_kind=SNAPSHOT_KIND)
    meta = sections.get("meta")
    if not isinstance(meta, dict):
        raise SnapshotFormatError(f"{path}: missing meta section")

    dtype = getattr(torch, meta["dtype"])
    try:
        arrays = {name: sections[f"cloud/{name}"] for name in PARAMETER_NAMES}
    except KeyError as e:
        raise SnapshotFormatError(f"{path}: missing cloud section {e}") from e

    cloud = GaussianCloud.from_arrays(
        arrays["xyz"], arrays["rotation"], arrays["scaling"], arrays["opacity"], arrays["color"],
        dtype=dtype, device=device,
    )
    field = DeformationField(**meta["field"]).to(dtype=dtype, device=device)
    state = {
        key[len("field/"):]: torch.from_numpy(np.array(value))
        for key, value in sections.items()
        if key.startswith("field/")
    }
    missing = set(field.state_dict()) - set(state)
    if missing:
        raise SnapshotFormatError(f"{path}: missing field tensors {sorted(missing)}")
    field.load_state_dict(state)

    logger.info("Snapshot loaded", path=str(path), gaussians=cloud.num_gaussians)
    return SceneSnapshot(
        cloud=cloud,
        field=field,
        scene_extent=meta["scene_extent"],
        frame_count=meta["frame_count"],
        time_scale=meta["time_scale"],
        metadata=meta.get("metadata", {}),
    )
