"""Curvature, imperceptibility scores and patch selection."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Patch, PointCloud, estimate_normals, farthest_point_sample, knn_all

DEFAULT_KC = 10


class Strategy(str, enum.Enum):
    HIGH_PIS = "hpis"
    LOW_PIS = "lpis"
    RANDOM = "random"
    FPS_POINTS = "fpsp"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, cls):
            return value
        aliases = {"highpis": "hpis", "lowpis": "lpis", "fpspoints": "fpsp"}
        key = str(value).lower().replace("_", "").replace("-", "")
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown selection strategy {value!r}") from None


@dataclass(frozen=True)
class ImperceptibilityMap:
    point_scores: np.ndarray
    patch_scores: np.ndarray


def _with_normals(cloud: PointCloud) -> PointCloud:
    return cloud if cloud.has_normals else estimate_normals(cloud, k=DEFAULT_KC)


def curvature_terms(points: np.ndarray, normals: np.ndarray, nbrs: np.ndarray):
    """Per-point mean |cos| between chord directions and the point normal.

    Returns (curvatures, zero_chord_flags); a zero chord contributes 0.
    """
    chords = points[nbrs] - points[:, None, :]
    lengths = np.linalg.norm(chords, axis=2)
    zero = lengths == 0.0
    safe = np.where(zero, 1.0, lengths)
    cos = np.abs(np.einsum("nkd,nd->nk", chords, normals)) / safe
    cos[zero] = 0.0
    return cos.mean(axis=1), zero.any(axis=1)


def curvature_map(cloud: PointCloud, k_c: int = DEFAULT_KC, return_flags: bool = False):
    cloud = _with_normals(cloud)
    nbrs = knn_all(cloud.points, k_c)
    curv, flags = curvature_terms(cloud.points, cloud.normals, nbrs)
    return (curv, flags) if return_flags else curv


def point_curvature(cloud: PointCloud, j: int, k_c: int = DEFAULT_KC) -> float:
    if not cloud.has_normals:
        raise ValueError("point_curvature needs normals")
    return float(curvature_map(cloud, k_c)[j])


def curvature_std(curvatures: np.ndarray, nbrs: np.ndarray) -> np.ndarray:
    """Population standard deviation of curvature over each neighbour set."""
    return np.asarray(curvatures)[nbrs].std(axis=-1)


def imperceptibility_scores(cloud: PointCloud, k_c: int = DEFAULT_KC) -> np.ndarray:
    """IS for every point: spread of its k_c neighbours' curvatures (self excluded)."""
    cloud = _with_normals(cloud)
    nbrs = knn_all(cloud.points, k_c)
    curv, _ = curvature_terms(cloud.points, cloud.normals, nbrs)
    return curvature_std(curv, nbrs)


def imperceptibility_score(cloud: PointCloud, j: int, k_c: int = DEFAULT_KC) -> float:
    return float(imperceptibility_scores(cloud, k_c)[j])


def patch_imperceptibility_score(point_scores: np.ndarray, patch: Patch) -> float:
    return float(np.mean(np.asarray(point_scores)[patch.member_indices]))


def score_cloud(cloud: PointCloud, patches: Sequence[Patch], k_c: int = DEFAULT_KC) -> ImperceptibilityMap:
    point_scores = imperceptibility_scores(cloud, k_c)
    if patches:
        members = np.stack([p.member_indices for p in patches])
        patch_scores = point_scores[members].mean(axis=1)
    else:
        patch_scores = np.zeros(0)
    return ImperceptibilityMap(point_scores, patch_scores)


def rank_by_pis(patch_scores: np.ndarray, indices=None) -> np.ndarray:
    """Patch indices in descending PIS, ties toward the lower index."""
    idx = np.arange(len(patch_scores)) if indices is None else np.asarray(indices)
    return idx[np.lexsort((idx, -patch_scores[idx]))]


def select_indices(patch_scores: np.ndarray, m: int, strategy="hpis", seed=0) -> np.ndarray:
    """Indices of the m selected patches in descending PIS (not valid for fpsp)."""
    strategy = Strategy.parse(strategy)
    g = len(patch_scores)
    if m > g:
        raise ValueError(f"cannot select m={m} of g={g} patches")
    if m < 0:
        raise ValueError("m must be non-negative")
    if strategy is Strategy.HIGH_PIS:
        return rank_by_pis(patch_scores)[:m]
    if strategy is Strategy.LOW_PIS:
        ascending = np.lexsort((np.arange(g), patch_scores))
        return rank_by_pis(patch_scores, ascending[:m])
    if strategy is Strategy.RANDOM:
        rng = np.random.default_rng(seed)
        return rank_by_pis(patch_scores, np.sort(rng.choice(g, size=m, replace=False)))
    raise ValueError("fpsp does not select among patches")


def select_patches(
    patches: Sequence[Patch],
    imap: ImperceptibilityMap,
    m: int,
    strategy="hpis",
    seed=0,
    cloud: PointCloud | None = None,
) -> list[Patch]:
    """Choose m patches for injection, returned in descending PIS order.

    ``fpsp`` ignores the patches and returns one pseudo-patch of m*k_g FPS points;
    it needs ``cloud``.
    """
    strategy = Strategy.parse(strategy)
    g = len(patches)
    if m > g:
        raise ValueError(f"cannot select m={m} of g={g} patches")
    if m < 0:
        raise ValueError("m must be non-negative")
    if m == 0:
        return []
    if strategy is Strategy.FPS_POINTS:
        if cloud is None:
            raise ValueError("fpsp strategy needs the source cloud")
        k_g = len(patches[0])
        count = m * k_g
        if count > len(cloud):
            raise ValueError(f"fpsp needs m*k_g={count} <= N={len(cloud)}")
        idx = farthest_point_sample(cloud, count, seed)
        return [Patch(int(idx[0]), idx, cloud.points[idx].copy())]
    chosen = select_indices(imap.patch_scores, m, strategy, seed)
    return [patches[i] for i in chosen]
