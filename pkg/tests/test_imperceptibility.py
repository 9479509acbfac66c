import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import cube_surface, plane_grid, sphere_points
from spba.geometry import PointCloud, patchify
from spba.imperceptibility import (
    DEFAULT_KC,
    Strategy,
    curvature_map,
    curvature_std,
    imperceptibility_score,
    imperceptibility_scores,
    patch_imperceptibility_score,
    point_curvature,
    score_cloud,
    select_patches,
)


def oracle_curvature(points, normals, j, k):
    d = np.linalg.norm(points - points[j], axis=1)
    d[j] = -1
    nbrs = np.argsort(d, kind="stable")[1:k + 1]
    total = 0.0
    for q in nbrs:
        chord = points[q] - points[j]
        total += abs(chord @ normals[j]) / np.linalg.norm(chord)
    return total / k, nbrs


def test_default_neighbourhood():
    assert DEFAULT_KC == 10


def test_plane_is_flat():
    c = plane_grid()
    interior = [i for i, p in enumerate(c.points) if 0.25 < p[0] < 0.65 and 0.25 < p[1] < 0.65]
    curv = curvature_map(c, 10)
    isc = imperceptibility_scores(c, 10)
    assert np.abs(curv).max() < 1e-12
    assert np.abs(isc[interior]).max() < 1e-12


def test_sphere_half_chord_identity():
    pts = sphere_points(500, 4)
    c = PointCloud(pts, pts.copy())
    curv = curvature_map(c, 10)
    for j in range(0, 500, 25):
        d = np.linalg.norm(pts - pts[j], axis=1)
        d[j] = np.inf
        half = np.sort(d)[:10] / 2.0
        assert abs(curv[j] - half.mean()) < 1e-6
        assert abs(point_curvature(c, j, 10) - curv[j]) < 1e-15


def test_curvature_matches_oracle(rng):
    pts = rng.normal(size=(80, 3))
    nrm = rng.normal(size=(80, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    c = PointCloud(pts, nrm)
    curv = curvature_map(c, 7)
    for j in range(0, 80, 7):
        expect, _ = oracle_curvature(pts, nrm, j, 7)
        assert abs(curv[j] - expect) < 1e-12
        assert 0.0 <= curv[j] <= 1.0


def test_zero_chord_flagged():
    pts = np.array([[0.0, 0, 0], [0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    nrm = np.tile([0, 0, 1.0], (5, 1))
    curv, flags = curvature_map(PointCloud(pts, nrm), 3, return_flags=True)
    assert flags[0] and flags[1]
    assert np.all(np.isfinite(curv))


def test_is_toy_population_std():
    curv = np.array([0.1, 0.1, 0.3, 42.0])
    got = curvature_std(curv, np.array([[0, 1, 2]]))[0]
    expect = np.sqrt(((curv[:3] - curv[:3].mean()) ** 2).sum() / 3)
    assert got == pytest.approx(expect, abs=1e-15)
    assert got == pytest.approx(0.0943, abs=5e-5)


def test_is_matches_oracle(rng):
    pts = rng.normal(size=(60, 3))
    nrm = rng.normal(size=(60, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    c = PointCloud(pts, nrm)
    curv = np.array([oracle_curvature(pts, nrm, j, 5)[0] for j in range(60)])
    for j in (0, 13, 59):
        _, nbrs = oracle_curvature(pts, nrm, j, 5)
        vals = curv[nbrs]
        expect = np.sqrt(np.mean((vals - vals.mean()) ** 2))
        assert imperceptibility_score(c, j, 5) == pytest.approx(expect, abs=1e-12)


def crease_cloud(step=0.1, n=10):
    """L-shaped fold: floor z=0 for x<=0 and wall x=0 for z>0."""
    pts, nrm = [], []
    for i in range(n):
        for y in range(n):
            pts.append([-i * step, y * step, 0.0])
            nrm.append([0, 0, 1.0])
    for i in range(1, n):
        for y in range(n):
            pts.append([0.0, y * step, i * step])
            nrm.append([1.0, 0, 0])
    return PointCloud(np.array(pts), np.array(nrm))


def test_crease_scores_above_plane_interior():
    c = crease_cloud()
    isc = imperceptibility_scores(c, 10)
    crease = [i for i, p in enumerate(c.points) if p[0] == 0 and p[2] == 0 and 0.3 <= p[1] <= 0.6]
    far = [i for i, p in enumerate(c.points) if p[0] <= -0.7 and 0.3 <= p[1] <= 0.6]
    assert min(isc[crease]) > max(isc[far])


def test_pis_is_mean(rng, random_cloud):
    patches = patchify(random_cloud, 8, 16, 0)
    imap = score_cloud(random_cloud, patches, 10)
    for i, p in enumerate(patches):
        expect = sum(imap.point_scores[j] for j in p.member_indices) / len(p)
        assert abs(imap.patch_scores[i] - expect) < 1e-12
        assert patch_imperceptibility_score(imap.point_scores, p) == pytest.approx(imap.patch_scores[i], abs=1e-12)
        member = imap.point_scores[p.member_indices]
        assert member.min() - 1e-15 <= imap.patch_scores[i] <= member.max() + 1e-15
    assert np.all(imap.point_scores >= 0)


def test_pis_trivial():
    from spba.geometry import Patch

    p = Patch(0, np.array([0, 1]), np.zeros((2, 3)))
    assert patch_imperceptibility_score(np.array([0.0, 1.0]), p) == 0.5
    assert patch_imperceptibility_score(np.array([0.3, 0.3]), p) == pytest.approx(0.3)


def classify_cube_patches(cloud, patches):
    pts = cloud.points
    on_edge = (np.abs(pts) > 1 - 1e-9).sum(axis=1) >= 2
    interior, edge = [], []
    for i, p in enumerate(patches):
        m = pts[p.member_indices]
        if on_edge[p.member_indices].any():
            edge.append(i)
            continue
        face_axis = np.argmax(np.abs(m), axis=1)
        if len(set(face_axis)) == 1:
            inplane = np.delete(m, face_axis[0], axis=1)
            if np.abs(inplane).max() <= 0.5:
                interior.append(i)
    return interior, edge


def test_cube_face_interior_ranks_below_edges():
    cloud = cube_surface(20)
    patches = patchify(cloud, 96, 16, 0)
    imap = score_cloud(cloud, patches, 10)
    interior, edge = classify_cube_patches(cloud, patches)
    assert interior and edge
    assert imap.patch_scores[interior].max() < imap.patch_scores[edge].min()
    ranked = select_patches(patches, imap, len(patches), "hpis")
    order = [next(i for i, q in enumerate(patches) if q is p) for p in ranked]
    pos = {pid: r for r, pid in enumerate(order)}
    assert max(pos[i] for i in edge) < min(pos[i] for i in interior)


class TestSelect:
    @pytest.fixture
    def scored(self, random_cloud):
        patches = patchify(random_cloud, 12, 16, 0)
        return random_cloud, patches, score_cloud(random_cloud, patches, 10)

    def test_all_sorted(self, scored):
        _, patches, imap = scored
        sel = select_patches(patches, imap, len(patches), "hpis")
        scores = [imap.patch_scores[[q is p for q in patches].index(True)] for p in sel]
        assert scores == sorted(scores, reverse=True)

    def test_high_low_disjoint(self, scored):
        _, patches, imap = scored
        hi = {p.center_index for p in select_patches(patches, imap, 6, "hpis")}
        lo = {p.center_index for p in select_patches(patches, imap, 6, "lpis")}
        assert not hi & lo

    def test_random_seeded(self, scored):
        _, patches, imap = scored
        a = [p.center_index for p in select_patches(patches, imap, 5, "random", seed=3)]
        b = [p.center_index for p in select_patches(patches, imap, 5, "random", seed=3)]
        assert a == b and len(set(a)) == 5

    def test_fps_points(self, scored):
        cloud, patches, imap = scored
        (pseudo,) = select_patches(patches, imap, 4, Strategy.FPS_POINTS, cloud=cloud)
        assert len(pseudo) == 4 * 16
        assert len(np.unique(pseudo.member_indices)) == 64

    def test_m_too_large(self, scored):
        _, patches, imap = scored
        with pytest.raises(ValueError):
            select_patches(patches, imap, 13, "hpis")

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            Strategy.parse("best")

    def test_paper_default_counts(self):
        from spba.attack import PoisonConfig

        cfg = PoisonConfig()
        assert (cfg.m, cfg.g) == (16, 32)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.05, 20.0), st.integers(0, 1000))
def test_ranking_scale_invariant(scale, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(120, 3))
    nrm = rng.normal(size=(120, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    base = PointCloud(pts, nrm)
    scaled = PointCloud(pts * scale, nrm)
    pa = patchify(base, 10, 12, seed)
    pb = patchify(scaled, 10, 12, seed)
    sa = score_cloud(base, pa, 8).patch_scores
    sb = score_cloud(scaled, pb, 8).patch_scores
    np.testing.assert_allclose(sa, sb, atol=1e-12)
    gaps = np.diff(np.sort(sa))
    if gaps.size and gaps.min() > 1e-9:
        assert np.array_equal(np.argsort(-sa), np.argsort(-sb))
