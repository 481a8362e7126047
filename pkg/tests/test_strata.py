import math
import warnings

import numpy as np
import pytest

from lcbyol import strata as S


@pytest.mark.parametrize("extent,n", [((1024, 768), 12), ((256, 256), 1), ((255, 255), 0)])
def test_grid_examples(extent, n):
    g = S.grid_cells(extent, 256, 256)
    assert len(g) == n == len(g.valid)


def test_grid_row_major_and_contained():
    g = S.grid_cells((300, 200), 64, 32)
    assert (g.rows, g.cols) == (5, 8)
    assert g.cell_origin(0) == (0, 0) and g.cell_origin(1) == (0, 32) and g.cell_origin(8) == (32, 0)
    y0, x0, y1, x1 = g.cell_rect(len(g) - 1)
    assert y1 <= 200 and x1 <= 300


def test_zonal_histogram_simple_cases():
    ref = np.full((4, 4), 3)
    np.testing.assert_array_equal(S.zonal_histogram((0, 0, 4, 4), ref, 1), np.eye(8)[2])
    ref[:, 2:] = 5
    h = S.zonal_histogram((0, 0, 4, 4), ref, 1)
    assert h[2] == h[4] == 0.5
    with pytest.raises(ValueError, match="nodata"):
        S.zonal_histogram((0, 0, 2, 2), np.zeros((4, 4), dtype=int), 1)


def test_zonal_histogram_matches_pixel_count(rng):
    ref = rng.integers(0, 9, (8, 8))
    res = 3
    for rect in [(0, 0, 24, 24), (2, 5, 13, 20), (7, 1, 9, 4)]:
        y0, x0, y1, x1 = rect
        counts = np.zeros(8)
        for y in range(y0, y1):
            for x in range(x0, x1):
                v = ref[min(y // res, 7), min(x // res, 7)]
                if v:
                    counts[v - 1] += 1
        h = S.zonal_histogram(rect, ref, res)
        np.testing.assert_allclose(h, counts / counts.sum(), atol=1e-12)
        assert abs(h.sum() - 1) < 1e-9


def test_zonal_histograms_marks_nodata_invalid():
    ref = np.ones((4, 4), dtype=int)
    ref[:2, :2] = 0
    g = S.grid_cells((4, 4), 2, 2)
    S.zonal_histograms(g, ref, 1)
    assert g.valid.tolist() == [False, True, True, True]


def test_pca_line_and_isotropic(rng):
    t = rng.standard_normal(50)
    line = np.outer(t, [1.0, 2.0, -1.0]) + 4
    p = S.pca_fit(line, 0.95)
    assert p.n_components == 1 and abs(p.explained_variance_ratio.sum() - 1) < 1e-12
    iso = rng.standard_normal((400, 3))
    assert S.pca_fit(iso, 1.0).n_components == 3
    flat = S.pca_fit(np.ones((5, 3)))
    assert p.components.shape == (3, 1) and flat.n_components == 0
    with pytest.raises(ValueError):
        S.pca_fit(np.ones((1, 3)))


def test_pca_against_eigh(rng):
    X = rng.standard_normal((60, 6)) @ rng.standard_normal((6, 6))
    p = S.pca_fit(X, 0.9)
    B = p.components
    np.testing.assert_allclose(B.T @ B, np.eye(B.shape[1]), atol=1e-10)
    C = np.cov(X, rowvar=False)
    vals, vecs = np.linalg.eigh(C)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    k = int(np.searchsorted(np.cumsum(vals) / vals.sum(), 0.9) + 1)
    assert p.n_components == k
    Xc = X - X.mean(0)
    np.testing.assert_allclose(Xc @ B @ B.T, Xc @ vecs[:, :k] @ vecs[:, :k].T, atol=1e-6)


def test_kmeans_examples(rng):
    X = rng.standard_normal((30, 2))
    km = S.kmeans(X, 1)
    np.testing.assert_allclose(km.centroids[0], X.mean(0))
    blobs = np.vstack([rng.normal(0, 0.1, (20, 2)), rng.normal(10, 0.1, (20, 2))])
    km = S.kmeans(blobs, 2, seed=3)
    assert len(set(km.assignments[:20])) == 1 and len(set(km.assignments[20:])) == 1
    assert km.assignments[0] != km.assignments[-1]
    with pytest.raises(ValueError):
        S.kmeans(X, 31)


def test_kmeans_sse_monotone_and_fixpoint(rng):
    X = rng.standard_normal((200, 3))
    km = S.kmeans(X, 7, seed=1)
    h = km.sse_history
    assert all(a >= b - 1e-9 for a, b in zip(h, h[1:]))
    d = ((X[:, None] - km.centroids[None]) ** 2).sum(-1)
    assert np.array_equal(np.argmin(d, 1), km.assignments)
    assert len(set(km.assignments.tolist())) == 7


def test_assign_folds_structure(rng):
    ids = np.arange(100)
    assign = np.repeat(np.arange(10), 10)
    cfg = S.StratifyConfig(10, 4, 4, seed=0)
    plan = S.assign_folds(ids, assign, np.arange(10.0)[:, None], cfg, np.random.default_rng(0))
    assert [len(f) for f in plan.folds] == [10] * 4
    for f in range(4):
        assert sorted(plan.fold_strata[f]) == list(range(10))
        assert all(assign[i] == s for i, s in zip(plan.folds[f], plan.fold_strata[f]))
    assert not S.verify_plan(plan)
    again = S.assign_folds(ids, assign, np.arange(10.0)[:, None], cfg, np.random.default_rng(0))
    assert again.folds == plan.folds


def test_deficient_stratum_is_merged():
    assign = np.array([0] * 5 + [1] * 2 + [2] * 6)
    centroids = np.array([[0.0], [0.9], [5.0]])
    with pytest.warns(UserWarning, match="merged into stratum 0"):
        out = S.merge_deficient_strata(assign, centroids, 4)
    assert sorted(set(out.tolist())) == [0, 2] and (out == 0).sum() == 7


def test_stratify_config_validation():
    with pytest.raises(ValueError):
        S.StratifyConfig(10, 3, 4)
    with pytest.raises(ValueError):
        S.ExclusionRule(-1, 0)


def test_pretrain_split_examples():
    cands = list(range(1000))
    labeled = list(range(0, 1000, 10))
    pre, val = S.pretrain_split(cands, labeled, (0.20, 0.05), seed=1, basis="remaining")
    assert (len(pre), len(val)) == (180, 45)
    assert not (set(pre) | set(val)) & set(labeled) and not set(pre) & set(val)
    pre, val = S.pretrain_split(cands, labeled, (0.20, 0.05), seed=1)
    assert (len(pre), len(val)) == (200, 50)
    assert S.pretrain_split(cands, labeled, (0.0, 0.0)) == ([], [])
    with pytest.raises(ValueError):
        S.pretrain_split(cands, labeled, (0.7, 0.5))


def brute_check(points, rects, rule):
    for a, (ya, xa) in enumerate(points):
        for yb, xb in points[a + 1:]:
            assert math.hypot(ya - yb, xa - xb) >= rule.min_dist_point
        for y0, x0, y1, x1 in rects:
            dy = max(y0 - ya, 0, ya - (y1 - 1))
            dx = max(x0 - xa, 0, xa - (x1 - 1))
            assert math.hypot(dy, dx) >= rule.min_dist_patch


def test_sample_points_constraints():
    rule = S.ExclusionRule(0, 50)
    pts = S.sample_points((10_000, 10_000), 10, rule, seed=0)
    assert len(pts) == 10
    brute_check(pts, [], rule)
    rects = [(100, 100, 164, 164), (400, 20, 464, 84)]
    rule = S.ExclusionRule(30, 40)
    pts = S.sample_points((600, 600), 60, rule, rects, seed=4)
    assert len(pts) == 60
    brute_check(pts, rects, rule)
    assert pts == S.sample_points((600, 600), 60, rule, rects, seed=4)
    free = S.sample_points((20, 20), 30, S.ExclusionRule(0, 0), rects, seed=2)
    assert len(free) == 30


def test_sample_points_saturation_warns():
    with pytest.warns(UserWarning, match="saturated"):
        pts = S.sample_points((50, 50), 100, S.ExclusionRule(0, 30), seed=0, max_tries=200)
    assert 1 <= len(pts) < 100
    with pytest.raises(ValueError):
        S.sample_points((50, 50), 0, S.ExclusionRule())


def test_stratified_plan_reproducible(rng):
    ref = np.kron(rng.integers(1, 9, (12, 12)), np.ones((2, 2), dtype=int))
    g = S.grid_cells((96, 96), 8, 8)
    cfg = S.StratifyConfig(6, 4, 4, seed=7)
    rule = S.ExclusionRule(2, 4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        plan, summary = S.stratified_plan(g, ref, 4, cfg, rule, n_points=20)
        again, _ = S.stratified_plan(S.grid_cells((96, 96), 8, 8), ref, 4, cfg, rule, n_points=20)
    assert plan == again
    rects = [g.cell_rect(i) for i in plan.labeled_ids]
    assert not S.verify_plan(plan, rule, rects, len(g))
    assert summary.n_candidates == 144 and len(plan.folds[0]) == summary.n_strata <= 6


def test_verify_plan_flags_violations():
    plan = S.SplitPlan([[1, 2], [2, 3]], [[0, 1], [0, 0]], pretrain_ids=[3])
    problems = S.verify_plan(plan)
    assert any("folds 0 and 1" in p for p in problems)
    assert any("twice" in p for p in problems)
    assert any("overlap" in p for p in problems)


def test_extract_cells():
    raster = np.arange(2 * 8 * 8).reshape(2, 8, 8)
    g = S.grid_cells((8, 8), 4, 4)
    out = S.extract_cells(raster, g, [3, 0])
    assert out.shape == (2, 2, 4, 4)
    assert np.array_equal(out[0], raster[:, 4:, 4:])
