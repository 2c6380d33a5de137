"""Shared mesh builders for the test suite.

Builders are plain functions so tests can parameterize size/placement;
fixtures wrap the common defaults.
"""
import numpy as np
import pytest

from ribfence.geometry import TriMesh

# quad -> two triangles, outward CCW winding verified by signed volume tests
_CUBE_QUADS = (
    (0, 2, 6, 4),  # z = 0
    (1, 5, 7, 3),  # z = 1
    (0, 4, 5, 1),  # y = 0
    (2, 3, 7, 6),  # y = 1
    (0, 1, 3, 2),  # x = 0
    (4, 6, 7, 5),  # x = 1
)


def make_cube(edge=1.0, center=(0.0, 0.0, 0.0)):
    v = np.array([(x, y, z) for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.float64)
    v = (v - 0.5) * edge + np.asarray(center, dtype=np.float64)
    faces = []
    for a, b, c, d in _CUBE_QUADS:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return TriMesh(v, np.asarray(faces, dtype=np.int64))


def make_tetra():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64)
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]], dtype=np.int64)
    return TriMesh(v, f)


def make_icosphere(subdiv=2, radius=1.0, center=(0.0, 0.0, 0.0)):
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdiv):
        cache = {}
        new_faces = []

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.asarray(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriMesh(v, np.asarray(faces, dtype=np.int64))


def make_trough():
    """Two faces rising from a shared bottom edge, normals up into the valley."""
    v = np.array([
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.5, -1.0, 1.0],
        [0.5, 1.0, 1.0],
    ])
    f = np.array([[1, 0, 2], [0, 1, 3]], dtype=np.int64)
    return TriMesh(v, f)


def make_planar_quad():
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=np.float64)
    f = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
    return TriMesh(v, f)


def random_triangle(rng, scale=1.0, min_area=1e-3):
    while True:
        tri = rng.uniform(-scale, scale, size=(3, 3))
        area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
        if area > min_area:
            return tri


@pytest.fixture(scope="session")
def icosphere():
    return make_icosphere(2)


@pytest.fixture(scope="session")
def cube():
    return make_cube()
