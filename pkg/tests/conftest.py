import math

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from mvcape.pose import Pose4, Pose6


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose4(rng, r_lo=0.5, r_hi=8.0) -> Pose4:
    return Pose4(
        rng.uniform(0, 2 * math.pi),
        rng.uniform(0, math.pi),
        rng.uniform(0, 2 * math.pi),
        math.exp(rng.uniform(math.log(r_lo), math.log(r_hi))),
    )


def random_pose6(rng, max_t=10.0) -> Pose6:
    R = Rotation.random(random_state=rng).as_matrix()
    direction = rng.normal(size=3)
    t = direction / np.linalg.norm(direction) * rng.uniform(0, max_t)
    return Pose6(R, t)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
