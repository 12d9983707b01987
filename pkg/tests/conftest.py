import numpy as np
import pytest

from monofem.ionic import AlievPanfilovParams
from monofem.mesh import TriMesh, unit_square_mesh


@pytest.fixture
def params():
    return AlievPanfilovParams()


@pytest.fixture
def reference_triangle():
    return TriMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                   np.array([[0, 1, 2]]))


@pytest.fixture
def mesh8():
    return unit_square_mesh(8)
