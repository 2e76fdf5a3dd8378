import numpy as np
import pytest

from semsplat.geometry import CameraIntrinsics
from semsplat.synthgen import SceneSpec, build_synthetic_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cam100():
    return CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)


@pytest.fixture(scope="session")
def room():
    return build_synthetic_scene(SceneSpec(density=24))


@pytest.fixture(scope="session")
def small_cam():
    return CameraIntrinsics.from_fov(80, 60, 70.0)


@pytest.fixture(scope="session")
def orbit_sequence(room, small_cam):
    """First 12 frames of a 100-frame orbit, with ground-truth poses."""
    from semsplat.synthgen import generate_trajectory, render_ground_truth

    poses = generate_trajectory("orbit", 100, room)[:12]
    return render_ground_truth(room, poses, small_cam), poses


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
