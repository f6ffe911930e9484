import numpy as np
import pytest

from meshfuse.mesh import TriangleMesh, mesh_to_graph
from meshfuse.synth import icosphere


@pytest.fixture(scope="session")
def sphere2():
    """Level-2 icosphere (162 vertices), the standard geometry fixture."""
    return icosphere(2)


@pytest.fixture(scope="session")
def sphere1():
    return icosphere(1)


@pytest.fixture()
def tetra():
    """Smallest valid mesh: a regular-ish tetrahedron."""
    verts = np.array(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    )
    faces = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriangleMesh(verts, faces)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform proper rotation (QR of a gaussian matrix, det fixed to +1)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture()
def graph_of():
    return mesh_to_graph
