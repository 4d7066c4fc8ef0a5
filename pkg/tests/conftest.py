import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from morphkit.landmarks import build_synthetic_scheme
from morphkit.mesh import TriMesh
from morphkit.synthetic import icosphere


def random_rotation(rng, max_angle=None):
    '''Uniform random rotation, or a random axis turned by at most max_angle radians'''
    if max_angle is None:
        return Rotation.random(random_state=rng).as_matrix()
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * rng.uniform(0, max_angle)).as_matrix()


def square_grid(n=5, size=1.0, z=0.0):
    '''Flat (n x n)-vertex grid in the z plane, two triangles per cell'''
    xs = np.linspace(0, size, n)
    xx, yy = np.meshgrid(xs, xs, indexing='ij')
    vertices = np.column_stack([xx.ravel(), yy.ravel(), np.full(n * n, z)])
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = i * n + j, (i + 1) * n + j, (i + 1) * n + j + 1, i * n + j + 1
            faces += [(a, b, c), (a, c, d)]
    return TriMesh(vertices, np.array(faces))


def _segment_distance(p, x, y):
    t = np.clip(np.dot(p - x, y - x) / np.dot(y - x, y - x), 0.0, 1.0)
    return np.linalg.norm(p - (x + t * (y - x)))


def point_triangle_distance(p, a, b, c):
    '''Distance from p to triangle abc: plane height when the foot falls inside, else the nearest edge'''
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    height = np.dot(p - a, n)
    foot = p - height * n
    if all(np.dot(np.cross(y - x, foot - x), n) >= 0 for x, y in ((a, b), (b, c), (c, a))):
        return abs(height)
    return min(_segment_distance(p, a, b), _segment_distance(p, b, c), _segment_distance(p, c, a))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sphere():
    vertices, faces = icosphere(2)
    return TriMesh(vertices, faces)


@pytest.fixture
def scheme():
    return build_synthetic_scheme()
