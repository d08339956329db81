import hypothesis
import numpy as np
import pytest

from linevio.geometry import CameraModel, Transform
from linevio.imu import ImuData
from linevio.sim import (
    SimConfig,
    default_rig,
    default_trajectory,
    generate_events,
    generate_imu,
    shapes_scene,
)

hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.load_profile("ci")


@pytest.fixture(scope="session")
def rig():
    return default_rig()


@pytest.fixture(scope="session")
def camera(rig):
    return rig[0]


@pytest.fixture(scope="session")
def extrinsics(rig):
    return rig[1]


@pytest.fixture(scope="session")
def small_scene():
    return shapes_scene(2.0)


@pytest.fixture(scope="session")
def small_traj():
    return default_trajectory(1.2)


@pytest.fixture(scope="session")
def small_sim(small_scene, small_traj, rig):
    """Short noiseless scene with a high-rate IMU; shared across test files."""
    camera, extrinsics = rig
    cfg = SimConfig(imu_rate=5000.0, edge_sample_spacing_px=2.0, contrast_step_px=1.0)
    imu_data, _, _ = generate_imu(small_traj, cfg, seed=1)
    events = generate_events(small_scene, small_traj, camera, extrinsics, cfg, seed=1)
    return imu_data, events


@pytest.fixture(scope="session")
def small_problem(small_scene, small_traj, small_sim, rig):
    from linevio.pipeline import build_reference_problem

    camera, extrinsics = rig
    imu_data, events = small_sim
    return build_reference_problem(
        small_scene, small_traj, events, imu_data, camera, extrinsics, window_events=2500
    )
