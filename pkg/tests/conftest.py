#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

import os

import numpy as np
import pytest

from scene3d_llm_tool.geometry import Aabb, CameraIntrinsics, CameraPose
from scene3d_llm_tool.synthworld import LabelEmbedding, Scene, SceneObject, make_scene, render_orbit


GOLDEN_DIR = os.path.join(os.path.dirname(__file__), 'golden')


def golden_path(name):
    return os.path.join(GOLDEN_DIR, name)


def read_golden(name):
    with open(golden_path(name), 'r', encoding='utf-8') as f:
        return f.read()


def random_pose(rng):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return CameraPose(q, rng.uniform(-5, 5, size=3))


@pytest.fixture
def intr():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=32.0, cy=24.0, width=64, height=48)


@pytest.fixture
def small_intr():
    return CameraIntrinsics.from_fov(32, 32, 60.0)


@pytest.fixture
def room():
    return Aabb([-2, -2, -2], [2, 2, 2])


@pytest.fixture
def embed():
    return LabelEmbedding(dim=16, seed=0)


@pytest.fixture
def three_object_scene(room):
    """Hand-placed scene whose serialization is committed under tests/golden."""
    return Scene(objects=[
        SceneObject(shape='sphere', center=(1.0, 1.0, 0.0), size=0.5, label='lamp'),
        SceneObject(shape='box', center=(-1.0, 0.0, 0.0), size=(0.5, 0.25, 0.5), label='chair'),
        SceneObject(shape='box', center=(0.5, -1.25, -1.0), size=(1.0, 0.5, 0.25), label='table'),
    ], bounds=room, seed=0)


@pytest.fixture
def two_sphere_scene(room):
    return Scene(objects=[
        SceneObject(shape='sphere', center=(0.8, 0.0, 0.0), size=0.6, label='chair'),
        SceneObject(shape='sphere', center=(-0.8, 0.2, 0.0), size=0.5, label='lamp'),
    ], bounds=room, seed=0)


@pytest.fixture
def orbit_views(two_sphere_scene, embed, small_intr):
    return render_orbit(two_sphere_scene, embed, 8, 6.0, small_intr, 0.5)


@pytest.fixture
def random_scenes(room):
    return [make_scene(seed, 3, room) for seed in range(5)]
