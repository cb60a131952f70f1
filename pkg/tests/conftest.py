import numpy as np
import pytest
from hypothesis import settings

from egoflow.geometry import CameraModel

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def cam32():
    return CameraModel.default(32, 32)


@pytest.fixture
def cam_desk():
    return CameraModel.default(48, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def angle_deg(a, b):
    a = np.asarray(a) / np.linalg.norm(a)
    b = np.asarray(b) / np.linalg.norm(b)
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b))))


# acceptance verdicts, echoed once more at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
