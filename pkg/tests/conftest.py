import numpy as np
import pytest

from spba.geometry import PointCloud, normalize


def sphere_points(n, seed=0):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(n, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def plane_grid(side=10, spacing=0.1):
    xs = np.arange(side) * spacing
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    pts = np.c_[gx.ravel(), gy.ravel(), np.zeros(side * side)]
    normals = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
    return PointCloud(pts, normals)


def cube_surface(per_edge=12):
    """Regular grid on the surface of [-1, 1]^3 with face normals (edge points keep one face's normal)."""
    t = np.linspace(-1.0, 1.0, per_edge)
    pts, nrm = [], []
    seen = set()
    for axis in range(3):
        for side in (-1.0, 1.0):
            a, b = [i for i in range(3) if i != axis]
            for u in t:
                for v in t:
                    p = np.zeros(3)
                    p[axis], p[a], p[b] = side, u, v
                    key = tuple(np.round(p, 9))
                    if key in seen:
                        continue
                    seen.add(key)
                    n = np.zeros(3)
                    n[axis] = side
                    pts.append(p)
                    nrm.append(n)
    return PointCloud(np.array(pts), np.array(nrm))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_cloud(rng):
    return normalize(PointCloud(rng.normal(size=(200, 3))))
