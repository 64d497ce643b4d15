import numpy as np
import pytest

from ellipt3d import frames, grid


@pytest.fixture(scope="session")
def ball8():
    return grid.assemble_point_cloud(grid.ball(1.0), 8)


@pytest.fixture(scope="session")
def ball12():
    return grid.assemble_point_cloud(grid.ball(1.0), 12)


@pytest.fixture(scope="session")
def ball16():
    return grid.assemble_point_cloud(grid.ball(1.0), 16)


@pytest.fixture(scope="session")
def hierarchy3():
    return frames.build_hierarchy(3)


@pytest.fixture(scope="session")
def hierarchy4():
    return frames.build_hierarchy(4)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
