"""Point-cloud containers, normalization, exact neighbor queries and FPS/KNN patches."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

_ZERO_DOT = 1e-12
_CHUNK_ELEMS = 1 << 22  # distance-matrix entries per block


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    label: Optional[int] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be N x 3, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError(f"normals shape {nrm.shape} does not match points {pts.shape}")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return replace(self, points=points)


@dataclass(frozen=True)
class Patch:
    """A center point and its k_g nearest neighbours (center included)."""

    center_index: int
    member_indices: np.ndarray
    coords: np.ndarray

    def __len__(self) -> int:
        return len(self.member_indices)


def normalize(cloud: PointCloud) -> PointCloud:
    """Center at the centroid and scale so the farthest point has norm 1."""
    pts = cloud.points
    if len(pts) == 0:
        raise ValueError("cannot normalize an empty cloud")
    centered = pts - pts.mean(axis=0)
    scale = np.sqrt((centered ** 2).sum(axis=1)).max()
    if scale == 0.0:
        raise ValueError("zero extent: all points are identical")
    out = centered / scale
    # re-center once more to remove residual rounding in the centroid
    out = out - out.mean(axis=0)
    out = out / np.sqrt((out ** 2).sum(axis=1)).max()
    return cloud.with_points(out)


def _as_points(cloud: Union[PointCloud, np.ndarray]) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def squared_distances(points: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Exact pairwise squared distances (Q x N) computed from coordinate differences."""
    diff = queries[:, None, :] - points[None, :, :]
    return np.einsum("qnd,qnd->qn", diff, diff)


def _sorted_neighbors(d2: np.ndarray, k: int) -> np.ndarray:
    """First k columns of a stable argsort: ascending distance, lowest index on ties."""
    d2 = np.atleast_2d(d2)
    n = d2.shape[-1]
    if k >= n or n <= 64:
        return np.argsort(d2, axis=-1, kind="stable")[..., :k]
    part = np.argpartition(d2, k - 1, axis=-1)[:, :k]
    kth = np.take_along_axis(d2, part, axis=-1).max(axis=-1)
    ties = (d2 <= kth[:, None]).sum(axis=-1) > k
    vals = np.take_along_axis(d2, part, axis=-1)
    out = np.take_along_axis(part, np.lexsort((part, vals), axis=-1), axis=-1)
    if ties.any():
        # a tie straddles the k-th slot: fall back to the full stable sort
        out[ties] = np.argsort(d2[ties], axis=-1, kind="stable")[:, :k]
    return out


def knn(cloud: Union[PointCloud, np.ndarray], query, k: int) -> np.ndarray:
    """Indices of the k nearest points to `query`, ascending distance, ties by index."""
    pts = _as_points(cloud)
    if k > len(pts):
        raise ValueError(f"k={k} exceeds number of points {len(pts)}")
    if k < 0:
        raise ValueError("k must be non-negative")
    q = np.asarray(query, dtype=np.float64).reshape(1, 3)
    return _sorted_neighbors(squared_distances(pts, q), k)[0]


def knn_all(points: np.ndarray, k: int, exclude_self: bool = True) -> np.ndarray:
    """k nearest neighbours of every point in `points` (N x k).

    With ``exclude_self`` the point itself is removed even when exact duplicates
    of it exist at lower indices.
    """
    n = len(points)
    need = k + 1 if exclude_self else k
    if need > n:
        raise ValueError(f"k={k} too large for {n} points")
    out = np.empty((n, need), dtype=np.int64)
    step = max(1, _CHUNK_ELEMS // max(n, 1))
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        d2 = squared_distances(points, points[lo:hi])
        rows = np.arange(hi - lo)
        # force self to the front, then drop it
        d2[rows, rows + lo] = -1.0
        out[lo:hi] = _sorted_neighbors(d2, need)
    return out[:, 1:] if exclude_self else out


def farthest_point_sample(cloud: Union[PointCloud, np.ndarray], g: int, seed) -> np.ndarray:
    pts = _as_points(cloud)
    n = len(pts)
    if g < 1 or g > n:
        raise ValueError(f"cannot sample g={g} centers from {n} points")
    rng = np.random.default_rng(seed)
    chosen = np.empty(g, dtype=np.int64)
    chosen[0] = rng.integers(n)
    mind = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    for i in range(1, g):
        # already-chosen points are masked so duplicates never repeat a center
        cand = np.where(taken, -np.inf, mind)
        nxt = int(np.argmax(cand))
        chosen[i] = nxt
        taken[nxt] = True
        mind = np.minimum(mind, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return chosen


def patchify(cloud: PointCloud, g: int, k_g: int, seed) -> list[Patch]:
    """Split a cloud into g (possibly overlapping) patches of k_g points each."""
    pts = cloud.points
    if k_g > len(pts):
        raise ValueError(f"k_g={k_g} exceeds number of points {len(pts)}")
    centers = farthest_point_sample(pts, g, seed)
    d2 = squared_distances(pts, pts[centers])
    d2[np.arange(g), centers] = -1.0
    members = _sorted_neighbors(d2, k_g)
    return [
        Patch(int(c), members[i].copy(), pts[members[i]].copy())
        for i, c in enumerate(centers)
    ]


def estimate_normals(cloud: PointCloud, k: int = 10, return_flags: bool = False):
    """PCA normals over the k-neighbourhood (point included), oriented away from the centroid.

    Points whose neighbourhood covariance has rank < 2 get +z and a True flag.
    """
    pts = cloud.points
    n = len(pts)
    if k < 3 or k > n:
        raise ValueError(f"need 3 <= k <= N, got k={k}, N={n}")
    nbrs = knn_all(pts, k, exclude_self=False)
    local = pts[nbrs] - pts[nbrs].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    top = evals[:, -1]
    rank = (evals > 1e-12 * np.maximum(top, 1e-300)[:, None]).sum(axis=1)
    flags = (rank < 2) | (top <= 1e-24)
    normals[flags] = (0.0, 0.0, 1.0)

    outward = pts - pts.mean(axis=0)
    dots = (normals * outward).sum(axis=1)
    for i in np.flatnonzero(~flags):
        d = dots[i]
        if abs(d) <= _ZERO_DOT:
            # tie: prefer +z, then +y, then +x
            for axis in (2, 1, 0):
                c = normals[i, axis]
                if abs(c) > _ZERO_DOT:
                    d = c
                    break
        if d < 0:
            normals[i] = -normals[i]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    out = replace(cloud, normals=normals)
    return (out, flags) if return_flags else out


def read_xyz(path: Union[str, Path], label: Optional[int] = None) -> PointCloud:
    """Read 'x y z [nx ny nz]' rows; '#' starts a comment."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = line.split()
            if len(vals) not in (3, 6):
                raise ValueError(f"{path}:{lineno}: expected 3 or 6 values, got {len(vals)}")
            rows.append([float(v) for v in vals])
    if not rows:
        raise ValueError(f"{path}: no points")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: mixed rows with and without normals")
    arr = np.array(rows, dtype=np.float64)
    normals = arr[:, 3:6] if arr.shape[1] == 6 else None
    return PointCloud(arr[:, :3], normals, label)


def write_xyz(path: Union[str, Path], cloud: PointCloud) -> None:
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    header = "x y z" + (" nx ny nz" if cloud.normals is not None else "")
    np.savetxt(path, data, fmt="%.17g", header=header, comments="# ")
