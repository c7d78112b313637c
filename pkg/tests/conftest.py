import numpy as np
import pytest

from poseact.geometry import CameraIntrinsics, StepSizes
from poseact.mesh import model_points, textured_cube

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def K():
    return CameraIntrinsics(320.0, 320.0, 160.0, 160.0, 320, 320)


@pytest.fixture(scope="session")
def cube():
    return textured_cube()


@pytest.fixture(scope="session")
def cube_points(cube):
    return model_points(cube)


@pytest.fixture
def steps():
    return StepSizes()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
