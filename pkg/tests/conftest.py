import numpy as np
import pytest

from tetsurf.marching import TriangleMesh
from tetsurf.sdfield import Box, Sphere, Torus


def regular_tetrahedron() -> TriangleMesh:
    p = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    t = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriangleMesh(p, t)


def icosahedron() -> TriangleMesh:
    g = (1 + 5**0.5) / 2
    p = np.array(
        [[-1, g, 0], [1, g, 0], [-1, -g, 0], [1, -g, 0], [0, -1, g], [0, 1, g],
         [0, -1, -g], [0, 1, -g], [g, 0, -1], [g, 0, 1], [-g, 0, -1], [-g, 0, 1]],
        dtype=float,
    )
    t = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    )
    return TriangleMesh(p, t)


@pytest.fixture
def sphere():
    return Sphere((0.5, 0.5, 0.5), 0.3)


@pytest.fixture
def torus():
    return Torus((0.5, 0.5, 0.5), 0.25, 0.1)


@pytest.fixture
def thin_box():
    return Box((0.5, 0.5, 0.5), (0.3, 0.3, 0.04))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
