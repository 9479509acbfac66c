"""Augmentations, statistical outlier removal, gradient saliency and the cluster baseline attack."""
from __future__ import annotations

import enum
from dataclasses import replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .classifier import ModelParams, forward, logit_input_grad
from .geometry import PointCloud

MAX_ANGLE_DEG = 10.0
SCALE_RANGE = (0.5, 1.5)
SHIFT_RANGE = 0.1
MAX_DROPOUT = 0.2
JITTER_SIGMA = 0.02
JITTER_CLIP = 0.05

SOR_K = 60
SOR_STD_MULT = 0.5
_SOR_SLACK = 1e-12

CLUSTER_FRACTION = 0.03
CLUSTER_RADIUS = 0.05
CLUSTER_CENTER = (0.5, 0.5, 0.5)


class Augmentation(str, enum.Enum):
    ROTATION_Z = "rotation_z"
    ROTATION_3D = "rotation_3d"
    SCALING = "scaling"
    SHIFT = "shift"
    DROPOUT = "dropout"
    JITTER = "jitter"

    @classmethod
    def parse(cls, value) -> "Augmentation":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "").replace("_", "")
        for member in cls:
            if member.value.replace("_", "") == key or member.name.replace("_", "").lower() == key:
                return member
        if key == "rotation":
            return cls.ROTATION_Z
        raise ValueError(f"unknown augmentation {value!r}")


def _rot(axis: int, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def _rotate(cloud: PointCloud, rot: np.ndarray) -> PointCloud:
    normals = None if cloud.normals is None else cloud.normals @ rot.T
    return replace(cloud, points=cloud.points @ rot.T, normals=normals)


def augment(cloud: PointCloud, kind, seed=None, *, draw=None) -> PointCloud:
    """Apply one random augmentation.

    ``draw`` overrides the random parameter: angle(s) in degrees for the
    rotations, the factor for scaling, a 3-vector for shift, the dropped
    fraction for dropout and an (N, 3) noise array for jitter.
    """
    kind = Augmentation.parse(kind)
    rng = np.random.default_rng(seed)
    lim = np.deg2rad(MAX_ANGLE_DEG)
    if kind is Augmentation.ROTATION_Z:
        angle = rng.uniform(-lim, lim) if draw is None else np.deg2rad(draw)
        return _rotate(cloud, _rot(2, angle))
    if kind is Augmentation.ROTATION_3D:
        angles = rng.uniform(-lim, lim, size=3) if draw is None else np.deg2rad(np.asarray(draw, dtype=float))
        # x first, then y, then z
        rot = _rot(2, angles[2]) @ _rot(1, angles[1]) @ _rot(0, angles[0])
        return _rotate(cloud, rot)
    if kind is Augmentation.SCALING:
        factor = rng.uniform(*SCALE_RANGE) if draw is None else float(draw)
        return cloud.with_points(cloud.points * factor)
    if kind is Augmentation.SHIFT:
        offset = rng.uniform(-SHIFT_RANGE, SHIFT_RANGE, size=3) if draw is None else np.asarray(draw, dtype=float)
        return cloud.with_points(cloud.points + offset)
    if kind is Augmentation.DROPOUT:
        n = len(cloud)
        frac = rng.uniform(0.0, MAX_DROPOUT) if draw is None else float(draw)
        n_drop = min(int(np.floor(frac * n)), n - 1)
        keep = np.ones(n, dtype=bool)
        if n_drop:
            keep[rng.choice(n, size=n_drop, replace=False)] = False
        normals = None if cloud.normals is None else cloud.normals[keep]
        return replace(cloud, points=cloud.points[keep], normals=normals)
    noise = rng.normal(0.0, JITTER_SIGMA, size=cloud.points.shape) if draw is None else np.asarray(draw, dtype=float)
    return cloud.with_points(cloud.points + np.clip(noise, -JITTER_CLIP, JITTER_CLIP))


def sor_mask(points: np.ndarray, k: int = SOR_K, std_mult: float = SOR_STD_MULT) -> np.ndarray:
    """Boolean keep-mask for statistical outlier removal."""
    n = len(points)
    if k >= n:
        raise ValueError(f"SOR needs k < N, got k={k}, N={n}")
    dist, _ = cKDTree(points).query(points, k=k + 1)
    # column 0 is the point itself (distance 0)
    mean_d = dist[:, 1:].mean(axis=1)
    threshold = mean_d.mean() + std_mult * mean_d.std()
    return mean_d <= threshold + _SOR_SLACK * max(1.0, abs(threshold))


def sor(cloud: PointCloud, k: int = SOR_K, std_mult: float = SOR_STD_MULT) -> PointCloud:
    keep = sor_mask(cloud.points, k, std_mult)
    normals = None if cloud.normals is None else cloud.normals[keep]
    return replace(cloud, points=cloud.points[keep], normals=normals)


def saliency(params: ModelParams, points: np.ndarray) -> np.ndarray:
    """Per-point L2 norm of the predicted-class logit gradient."""
    pred = int(np.argmax(forward(params, points)))
    return np.linalg.norm(logit_input_grad(params, points, pred), axis=1)


def saliency_topk(params: ModelParams, cloud, n: int = 40) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if n > len(pts):
        raise ValueError(f"n={n} exceeds number of points {len(pts)}")
    s = saliency(params, pts)
    idx = np.arange(len(pts))
    return np.lexsort((idx, -s))[:n]


def baseline_cluster_inject(cloud: PointCloud, seed=None, fraction: float = CLUSTER_FRACTION,
                            radius: float = CLUSTER_RADIUS, center=CLUSTER_CENTER,
                            return_indices: bool = False):
    """Replace a random 3% of points with a uniform ball of radius 0.05 at (0.5, 0.5, 0.5)."""
    rng = np.random.default_rng(seed)
    n = len(cloud)
    count = max(1, int(round(fraction * n)))
    idx = np.sort(rng.choice(n, size=count, replace=False))
    direction = rng.normal(size=(count, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.uniform(size=count) ** (1.0 / 3.0)
    pts = cloud.points.copy()
    pts[idx] = np.asarray(center) + direction * r[:, None]
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals.copy()
        normals[idx] = direction
    out = replace(cloud, points=pts, normals=normals)
    return (out, idx) if return_indices else out


def apply_chain(cloud: PointCloud, chain, seed=None) -> PointCloud:
    """Run defenses/augmentations in order; 'sor' is the only non-random step."""
    rng = np.random.default_rng(seed)
    for step in chain:
        if str(step).lower() == "sor":
            cloud = sor(cloud)
        else:
            cloud = augment(cloud, step, rng)
    return cloud
