import numpy as np
import pytest

from ctrpose.geometry import CameraIntrinsics
from ctrpose.kinematics import REFERENCE_ROBOT, load_robot, planar_arm
from ctrpose.synthgen import generate_samples


@pytest.fixture(scope="session")
def arm():
    return load_robot(REFERENCE_ROBOT)


@pytest.fixture(scope="session")
def intrinsics():
    return CameraIntrinsics(fx=64.0, fy=64.0, cx=31.5, cy=31.5, width=64, height=64)


@pytest.fixture(scope="session")
def planar():
    return planar_arm()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scenes(arm, intrinsics):
    """Four reference-arm scenes shared by the heavier tests."""
    return generate_samples(arm, intrinsics, 4, master_seed=11)


@pytest.fixture(autouse=True)
def isolated_output(tmp_path, monkeypatch):
    monkeypatch.setenv("CTRPOSE_OUTPUT_DIR", str(tmp_path / "runs"))
    monkeypatch.setenv("VERBOSE", "False")
    monkeypatch.delenv("CTRPOSE_SCENES_FILE", raising=False)
