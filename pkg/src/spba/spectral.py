"""Patch graphs, Laplacian eigenbases, GFT/IGFT and spectral trigger injection."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Patch, PointCloud, knn_all, patchify
from .imperceptibility import Strategy, score_cloud, select_indices, select_patches

SYMMETRY_TOL = 1e-9
_EIG_CLUSTER_TOL = 1e-9
_SIGN_TIE_TOL = 1e-12


@dataclass(frozen=True)
class PatchGraph:
    adjacency: np.ndarray
    degree: np.ndarray


@dataclass(frozen=True)
class SpectralBasis:
    eigenvectors: np.ndarray
    eigenvalues: np.ndarray

    @property
    def size(self) -> int:
        return len(self.eigenvalues)


@dataclass(frozen=True)
class SpectralTrigger:
    coefficients: np.ndarray

    @classmethod
    def zeros(cls, rows: int) -> "SpectralTrigger":
        return cls(np.zeros((rows, 3)))


def _coords(patch) -> np.ndarray:
    return patch.coords if isinstance(patch, Patch) else np.asarray(patch, dtype=np.float64)


def build_knn_graph(patch, k_p: int = 10) -> PatchGraph:
    """Unweighted kNN graph inside a patch, symmetrized by OR."""
    pts = _coords(patch)
    n = len(pts)
    if k_p >= n:
        raise ValueError(f"k_p={k_p} must be smaller than the patch size {n}")
    nbrs = knn_all(pts, k_p)
    adj = np.zeros((n, n), dtype=np.int64)
    adj[np.repeat(np.arange(n), k_p), nbrs.ravel()] = 1
    adj = adj | adj.T
    return PatchGraph(adj, adj.sum(axis=1))


def laplacian(graph: PatchGraph) -> np.ndarray:
    """Combinatorial Laplacian D - A, in the adjacency's (integer) dtype."""
    return np.diag(graph.degree) - graph.adjacency


def _canonical_signs(vecs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip columns so the largest-magnitude entry is positive; also return that entry's row."""
    mags = np.abs(vecs)
    peak = mags.max(axis=0)
    # first row within tolerance of the column peak decides
    lead = np.argmax(mags >= peak - _SIGN_TIE_TOL, axis=0)
    signs = np.sign(vecs[lead, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs, lead


def eigendecompose(L: np.ndarray) -> SpectralBasis:
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError(f"Laplacian must be square, got {L.shape}")
    asym = np.abs(L - L.T).max() if L.size else 0.0
    if asym > SYMMETRY_TOL:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    evals, vecs = np.linalg.eigh(L)
    vecs, lead = _canonical_signs(vecs)
    # inside a repeated eigenvalue, order columns by their leading row
    order = np.arange(len(evals))
    start = 0
    while start < len(evals):
        stop = start + 1
        while stop < len(evals) and evals[stop] - evals[start] <= _EIG_CLUSTER_TOL:
            stop += 1
        if stop - start > 1:
            block = order[start:stop]
            order[start:stop] = block[np.argsort(lead[block], kind="stable")]
        start = stop
    return SpectralBasis(vecs[:, order], evals[order])


def patch_basis(patch, k_p: int = 10) -> SpectralBasis:
    return eigendecompose(laplacian(build_knn_graph(patch, k_p)))


def gft(basis: SpectralBasis, coords: np.ndarray) -> np.ndarray:
    return basis.eigenvectors.T @ coords


def igft(basis: SpectralBasis, spectral: np.ndarray) -> np.ndarray:
    return basis.eigenvectors @ spectral


def _xi(trigger) -> np.ndarray:
    return trigger.coefficients if isinstance(trigger, SpectralTrigger) else np.asarray(trigger, dtype=np.float64)


def inject_trigger(patch, basis: SpectralBasis, trigger) -> np.ndarray:
    """Poisoned patch coordinates IGFT(GFT(S) + xi), evaluated as S + U xi.

    The two forms agree to rounding; the additive one keeps xi = 0 exact.
    """
    xi = _xi(trigger)
    S = _coords(patch)
    if xi.shape != S.shape:
        raise ValueError(f"trigger shape {xi.shape} does not match patch {S.shape}")
    return S + basis.eigenvectors @ xi


@dataclass(frozen=True)
class PoisonPlan:
    """Geometry-only part of poisoning one sample; reusable for any trigger.

    ``members[i]`` / ``bases[i]`` belong to the i-th selected patch in
    descending-PIS order, and ``write_masks[i]`` marks members this patch
    actually writes (points claimed by an earlier patch are skipped).
    """

    n_points: int
    members: np.ndarray  # (m, k) int
    bases: np.ndarray  # (m, k, k)
    write_masks: np.ndarray  # (m, k) bool
    patch_ids: np.ndarray  # (m,) index into the patchify output, -1 for fpsp
    patch_scores: np.ndarray  # (m,) PIS of the selected patches
    all_patch_scores: np.ndarray  # (g,)

    @property
    def trigger_rows(self) -> int:
        return self.members.shape[1]

    @property
    def perturbed_indices(self) -> np.ndarray:
        if len(self.members) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.sort(self.members[self.write_masks])

    def displacement(self, xi: np.ndarray) -> np.ndarray:
        """Spatial offsets (N x 3) added to the clean points by trigger xi."""
        out = np.zeros((self.n_points, 3))
        if len(self.members) == 0:
            return out
        shifts = np.einsum("mij,jd->mid", self.bases, xi)
        out[self.members[self.write_masks]] = shifts[self.write_masks]
        return out

    def apply(self, points: np.ndarray, xi: np.ndarray) -> np.ndarray:
        if len(self.members) and xi.shape != (self.trigger_rows, 3):
            raise ValueError(f"trigger shape {xi.shape} does not match plan rows {self.trigger_rows}")
        out = points.copy()
        if len(self.members) == 0:
            return out
        shifts = np.einsum("mij,jd->mid", self.bases, xi)
        sel = self.members[self.write_masks]
        out[sel] = points[sel] + shifts[self.write_masks]
        return out

    def trigger_grad(self, point_grads: np.ndarray) -> np.ndarray:
        """Pull a gradient w.r.t. the poisoned points back onto xi."""
        if len(self.members) == 0:
            return np.zeros((self.trigger_rows, 3))
        g = point_grads[self.members] * self.write_masks[:, :, None]
        return np.einsum("mij,mid->jd", self.bases, g)


def _write_masks(members: np.ndarray, n_points: int) -> np.ndarray:
    written = np.zeros(n_points, dtype=bool)
    masks = np.zeros(members.shape, dtype=bool)
    for i, mem in enumerate(members):
        fresh = ~written[mem]
        masks[i] = fresh
        written[mem[fresh]] = True
    return masks


def plan_poison(cloud: PointCloud, config, seed) -> PoisonPlan:
    """Patchify, score, select and build bases for one sample.

    ``config`` needs attributes g, k_g, m, k_c, k_p and strategy.
    """
    patches = patchify(cloud, config.g, config.k_g, seed)
    imap = score_cloud(cloud, patches, config.k_c)
    strategy = Strategy.parse(config.strategy)
    n = len(cloud)
    k = config.k_g
    if config.m == 0:
        return PoisonPlan(
            n, np.zeros((0, k), dtype=np.int64), np.zeros((0, k, k)), np.zeros((0, k), dtype=bool),
            np.zeros(0, dtype=np.int64), np.zeros(0), imap.patch_scores,
        )
    if strategy is Strategy.FPS_POINTS:
        (pseudo,) = select_patches(patches, imap, config.m, strategy, seed, cloud=cloud)
        members = pseudo.member_indices[None, :]
        bases = patch_basis(pseudo, config.k_p).eigenvectors[None]
        pis = np.array([imap.point_scores[pseudo.member_indices].mean()])
        ids = np.array([-1])
    else:
        ids = select_indices(imap.patch_scores, config.m, strategy, seed)
        members = np.stack([patches[i].member_indices for i in ids])
        bases = np.stack([patch_basis(patches[i], config.k_p).eigenvectors for i in ids])
        pis = imap.patch_scores[ids]
    return PoisonPlan(n, members, bases, _write_masks(members, n), ids, pis, imap.patch_scores)


def poison_sample(cloud: PointCloud, config, trigger, seed) -> PointCloud:
    plan = plan_poison(cloud, config, seed)
    return cloud.with_points(plan.apply(cloud.points, _xi(trigger)))


def poison_points(plans: Sequence[PoisonPlan], points: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Poison a stacked (B, N, 3) batch with one plan per sample."""
    return np.stack([p.apply(x, xi) for p, x in zip(plans, points)])


def trigger_rows_for(config) -> int:
    strategy = Strategy.parse(config.strategy)
    return config.m * config.k_g if strategy is Strategy.FPS_POINTS else config.k_g


__all__ = [
    "PatchGraph", "SpectralBasis", "SpectralTrigger", "PoisonPlan",
    "build_knn_graph", "laplacian", "eigendecompose", "patch_basis", "gft", "igft",
    "inject_trigger", "plan_poison", "poison_sample", "poison_points", "trigger_rows_for",
]


class TriggerFormatError(ValueError):
    pass


def save_trigger(path, trigger) -> None:
    """Row count as uint64 LE, then row-major float64 LE coefficients."""
    xi = np.ascontiguousarray(_xi(trigger), dtype="<f8")
    if xi.ndim != 2 or xi.shape[1] != 3:
        raise ValueError(f"trigger must be (k, 3), got {xi.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", xi.shape[0]))
        fh.write(xi.tobytes())


def load_trigger(path) -> SpectralTrigger:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise TriggerFormatError(f"{path}: truncated header at offset {len(data)}")
    (rows,) = struct.unpack_from("<Q", data, 0)
    expected = 8 + 24 * rows
    if len(data) != expected:
        raise TriggerFormatError(f"{path}: expected {expected} bytes for {rows} rows, found {len(data)}")
    xi = np.frombuffer(data, dtype="<f8", offset=8).reshape(rows, 3).astype(np.float64)
    if not np.isfinite(xi).all():
        raise TriggerFormatError(f"{path}: non-finite coefficients")
    return SpectralTrigger(xi)
