import numpy as np
import pytest

from hexbench import fixtures


@pytest.fixture(scope="session")
def cube2():
    return fixtures.cube_tet_mesh(2)


@pytest.fixture(scope="session")
def cube3():
    return fixtures.cube_tet_mesh(3)


@pytest.fixture(scope="session")
def jittered():
    return fixtures.jittered_tet_mesh(2, amount=0.15, seed=3)


@pytest.fixture(scope="session")
def hex222():
    return fixtures.hex_mesh_from_cells(fixtures.block_cells((2, 2, 2)))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
