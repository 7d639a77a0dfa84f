"""Shared fixtures: small cameras, random Gaussian scenes and tiny synthetic datasets."""

import math

import pytest

from factories import identity_camera, make_scene
from src.data.synthetic import generate_synthetic, moving_blob_spec
from src.splatting.geometry import Camera


@pytest.fixture
def camera():
    return identity_camera()


@pytest.fixture
def orbit_camera():
    return Camera.look_at(
        eye=(4.0 * math.sin(0.3), 0.5, -4.0 * math.cos(0.3)), target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0),
        fx=40.0, fy=40.0, width=32, height=32,
    )


@pytest.fixture
def scene():
    return make_scene()


@pytest.fixture
def blob_scene():
    """Six-frame monocular synthetic sequence (16x16) kept in memory."""
    return generate_synthetic(moving_blob_spec(frame_count=6, size=16))


@pytest.fixture
def blob_dataset_dir(tmp_path):
    out = tmp_path / "blob"
    generate_synthetic(moving_blob_spec(frame_count=6, size=16), out)
    return out
