"""Candidate gridding, composition strata, fold assignment and assessment points."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class PatchGrid:
    width: int
    height: int
    patch: int
    stride: int
    rows: int
    cols: int
    origin: tuple = (0, 0)
    valid: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(self.rows * self.cols, dtype=bool)

    def __len__(self):
        return self.rows * self.cols

    def cell_origin(self, i):
        """(row, col) pixel origin of cell ``i`` in row-major order."""
        r, c = divmod(int(i), self.cols)
        return self.origin[0] + r * self.stride, self.origin[1] + c * self.stride

    def cell_rect(self, i):
        y, x = self.cell_origin(i)
        return y, x, y + self.patch, x + self.patch

    def to_dict(self):
        return {"width": self.width, "height": self.height, "patch": self.patch, "stride": self.stride,
                "rows": self.rows, "cols": self.cols, "origin": list(self.origin)}


def grid_cells(extent, patch=256, stride=256, origin=(0, 0)) -> PatchGrid:
    """Row-major grid of every cell fully inside ``extent`` = (width, height)."""
    width, height = extent
    if width <= 0 or height <= 0:
        raise ValueError(f"extent must be positive, got {extent}")
    rows = (height - patch) // stride + 1 if height >= patch else 0
    cols = (width - patch) // stride + 1 if width >= patch else 0
    return PatchGrid(width, height, patch, stride, rows, cols, tuple(origin))


def _axis_counts(start, length, res, n_ref):
    idx = np.arange(start, start + length) // res
    idx = np.minimum(idx, n_ref - 1)
    lo = idx[0]
    return lo, np.bincount(idx - lo)


def zonal_histogram(cell_rect, reference, ref_res=1, n_classes=8, nodata=0):
    """Class-frequency vector of ``reference`` under a cell, by nearest-neighbour lookup.

    ``reference`` holds class codes 1..n_classes at ``ref_res`` fine pixels per
    coarse pixel; ``nodata`` pixels are excluded.  Raises ValueError if nothing
    valid remains.
    """
    y0, x0, y1, x1 = cell_rect
    ry, wy = _axis_counts(y0, y1 - y0, ref_res, reference.shape[0])
    rx, wx = _axis_counts(x0, x1 - x0, ref_res, reference.shape[1])
    block = reference[ry:ry + len(wy), rx:rx + len(wx)].astype(np.int64)
    weights = np.outer(wy, wx).astype(np.float64)
    ok = (block != nodata) & (block >= 1) & (block <= n_classes)
    counts = np.bincount(block[ok] - 1, weights=weights[ok], minlength=n_classes)
    total = counts.sum()
    if total <= 0:
        raise ValueError(f"cell {cell_rect} is entirely nodata")
    return counts / total


def zonal_histograms(grid: PatchGrid, reference, ref_res=1, n_classes=8, nodata=0):
    """Features for every cell; fully-nodata cells are marked invalid in ``grid.valid``."""
    feats = np.zeros((len(grid), n_classes))
    for i in range(len(grid)):
        try:
            feats[i] = zonal_histogram(grid.cell_rect(i), reference, ref_res, n_classes, nodata)
        except ValueError:
            grid.valid[i] = False
    return feats


# ---------------------------------------------------------------- PCA


@dataclass
class PCA:
    mean: np.ndarray
    components: np.ndarray  # (d, k), orthonormal columns
    explained_variance_ratio: np.ndarray

    @property
    def n_components(self):
        return self.components.shape[1]


def pca_fit(X, threshold=0.95) -> PCA:
    """Zero-mean (unscaled) PCA keeping the fewest components reaching ``threshold``."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("PCA needs at least 2 vectors")
    if not 0 < threshold <= 1:
        raise ValueError("variance threshold must lie in (0, 1]")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    var = s ** 2
    total = var.sum()
    if total <= 1e-12 * max(1.0, float(np.abs(X).max()) ** 2):
        return PCA(mean, np.zeros((X.shape[1], 0)), np.zeros(0))
    ratio = var / total
    cum = np.cumsum(ratio)
    k = int(np.searchsorted(cum, threshold - 1e-12) + 1)
    k = min(k, int((var > 1e-12 * total).sum()) if threshold < 1 else len(var))
    return PCA(mean, vt[:k].T.copy(), ratio[:k])


def pca_transform(pca: PCA, X):
    return (np.asarray(X, dtype=np.float64) - pca.mean) @ pca.components


# ---------------------------------------------------------------- k-means


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    sse_history: list
    n_iter: int


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)


def kmeans(X, k, seed=0, max_iter=300) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeding; ties go to the lowest centroid index."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if k > n:
        raise ValueError(f"k={k} exceeds the number of vectors ({n})")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    if X.shape[1] == 0:
        return KMeansResult(np.zeros(n, dtype=np.int64), np.zeros((k, 0)), [0.0], 0)
    centroids = [X[rng.integers(n)]]
    d2 = ((X - centroids[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        i = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centroids.append(X[i])
        d2 = np.minimum(d2, ((X - X[i]) ** 2).sum(1))
    C = np.array(centroids)
    assign = np.argmin(_sq_dists(X, C), axis=1)
    history, it = [], 0
    for it in range(1, max_iter + 1):
        for j in range(k):
            members = assign == j
            if members.any():
                C[j] = X[members].mean(0)
            else:
                far = int(np.argmax(((X - C[assign]) ** 2).sum(1)))
                C[j] = X[far]
                assign[far] = j
        d = _sq_dists(X, C)
        new = np.argmin(d, axis=1)
        history.append(float(d[np.arange(n), new].sum()))
        if np.array_equal(new, assign) and all((new == j).any() for j in range(k)):
            assign = new
            break
        assign = new
    return KMeansResult(assign, C, history, it)


# ---------------------------------------------------------------- splits


@dataclass
class StratifyConfig:
    n_strata: int = 250
    samples_per_stratum: int = 4
    n_folds: int = 4
    pca_threshold: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_stratum != self.n_folds:
            raise ValueError("samples per stratum must equal the fold count (one per fold)")
        if not 0 < self.pca_threshold <= 1:
            raise ValueError("PCA variance threshold must lie in (0, 1]")


@dataclass
class ExclusionRule:
    min_dist_patch: float = 200.0
    min_dist_point: float = 1000.0

    def __post_init__(self):
        if self.min_dist_patch < 0 or self.min_dist_point < 0:
            raise ValueError("exclusion distances must be >= 0")


@dataclass
class SplitPlan:
    folds: list  # list of lists of candidate ids
    fold_strata: list  # parallel to folds: stratum of each sampled id
    pretrain_ids: list = field(default_factory=list)
    pretrain_val_ids: list = field(default_factory=list)
    points: list = field(default_factory=list)  # [(row, col), ...]

    @property
    def labeled_ids(self):
        return [i for fold in self.folds for i in fold]

    def fold_of(self):
        return {i: f for f, fold in enumerate(self.folds) for i in fold}


def merge_deficient_strata(assignments, centroids, min_size):
    """Fold strata smaller than ``min_size`` into the stratum with the nearest centroid."""
    assign = np.asarray(assignments).copy()
    live = sorted(set(assign.tolist()))
    while True:
        sizes = {s: int((assign == s).sum()) for s in live}
        deficient = [s for s in live if sizes[s] < min_size]
        if not deficient:
            return assign
        if len(live) == 1:
            raise ValueError(f"only {sizes[live[0]]} candidates remain; need {min_size} per stratum")
        s = deficient[0]
        others = [o for o in live if o != s]
        d = ((centroids[others] - centroids[s]) ** 2).sum(1)
        target = others[int(np.argmin(d))]
        warnings.warn(f"stratum {s} has {sizes[s]} members (< {min_size}); merged into stratum {target}")
        assign[assign == s] = target
        live.remove(s)


def assign_folds(ids, assignments, centroids, config: StratifyConfig, rng: np.random.Generator):
    """Draw ``samples_per_stratum`` ids per stratum without replacement; the i-th goes to fold i."""
    ids = np.asarray(ids)
    assign = merge_deficient_strata(assignments, np.asarray(centroids), config.samples_per_stratum)
    folds = [[] for _ in range(config.n_folds)]
    fold_strata = [[] for _ in range(config.n_folds)]
    for s in sorted(set(assign.tolist())):
        members = ids[assign == s]
        picks = rng.choice(members, size=config.samples_per_stratum, replace=False)
        for f, pid in enumerate(picks):
            folds[f].append(int(pid))
            fold_strata[f].append(int(s))
    return SplitPlan(folds, fold_strata)


def pretrain_split(candidate_ids, labeled_ids, fractions=(0.20, 0.05), seed=0, basis="total"):
    """Simple random pretraining and pretraining-validation sets, disjoint from labeled ids.

    Fractions are taken of all candidates (``basis="total"``) or of the
    candidates left after removing labeled ids (``basis="remaining"``).
    """
    if sum(fractions) > 1:
        raise ValueError("fractions must sum to <= 1")
    labeled = set(int(i) for i in labeled_ids)
    pool = np.array([int(i) for i in candidate_ids if int(i) not in labeled], dtype=np.int64)
    n_base = len(candidate_ids) if basis == "total" else len(pool)
    sizes = [int(math.floor(f * n_base + 1e-9)) for f in fractions]
    if sum(sizes) > len(pool):
        raise ValueError(f"requested {sum(sizes)} pretraining ids but only {len(pool)} unlabeled candidates")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(pool, size=sum(sizes), replace=False) if sum(sizes) else np.array([], dtype=np.int64)
    out, start = [], 0
    for n in sizes:
        out.append(sorted(int(i) for i in chosen[start:start + n]))
        start += n
    return tuple(out)


def point_rect_distance(py, px, rects):
    """Euclidean distance from a point to each axis-aligned rectangle (0 inside).

    Rectangles are (y0, x0, y1, x1) pixel bounds, ``y1``/``x1`` exclusive; the
    boundary is taken at pixel centres of the edge pixels.
    """
    if len(rects) == 0:
        return np.zeros(0)
    r = np.asarray(rects, dtype=np.float64)
    dy = np.maximum(np.maximum(r[:, 0] - py, 0), py - (r[:, 2] - 1))
    dx = np.maximum(np.maximum(r[:, 1] - px, 0), px - (r[:, 3] - 1))
    return np.hypot(dy, dx)


def sample_points(extent, n, rule: ExclusionRule, patch_rects=(), seed=0, max_tries=None,
                  allowed=None):
    """Rejection-sample ``n`` integer pixel points honouring the exclusion rule.

    ``allowed`` optionally restricts candidates to a boolean (H, W) mask.  Stops
    early with a warning once ``max_tries`` consecutive draws fail.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    width, height = extent
    rng = np.random.default_rng(seed)
    max_tries = max_tries or 2000
    rects = np.asarray(patch_rects, dtype=np.float64).reshape(-1, 4)
    pts = np.zeros((0, 2))
    failures = 0
    while len(pts) < n:
        py, px = int(rng.integers(height)), int(rng.integers(width))
        ok = allowed is None or bool(allowed[py, px])
        if ok and len(rects) and rule.min_dist_patch > 0:
            ok = point_rect_distance(py, px, rects).min() >= rule.min_dist_patch
        if ok and len(pts) and rule.min_dist_point > 0:
            ok = np.hypot(pts[:, 0] - py, pts[:, 1] - px).min() >= rule.min_dist_point
        if ok:
            pts = np.vstack([pts, [py, px]])
            failures = 0
        else:
            failures += 1
            if failures >= max_tries:
                warnings.warn(f"extent saturated: placed {len(pts)} of {n} points")
                break
    return [(int(y), int(x)) for y, x in pts]


def verify_plan(plan: SplitPlan, rule: ExclusionRule | None = None, patch_rects=None, n_candidates=None):
    """Return a list of invariant violations (empty when the plan is sound)."""
    problems = []
    seen = {}
    for f, fold in enumerate(plan.folds):
        for i in fold:
            if i in seen:
                problems.append(f"id {i} in folds {seen[i]} and {f}")
            seen[i] = f
        if len(set(plan.fold_strata[f])) != len(plan.fold_strata[f]):
            problems.append(f"fold {f} draws twice from one stratum")
    strata_sets = [sorted(s) for s in plan.fold_strata]
    if any(s != strata_sets[0] for s in strata_sets):
        problems.append("folds do not cover the same strata")
    labeled = set(seen)
    pre, val = set(plan.pretrain_ids), set(plan.pretrain_val_ids)
    if pre & labeled or val & labeled or pre & val:
        problems.append("pretraining sets overlap labeled ids or each other")
    if n_candidates is not None and any(not 0 <= i < n_candidates for i in labeled | pre | val):
        problems.append("id outside candidate range")
    if rule is not None and plan.points:
        pts = np.asarray(plan.points, dtype=np.float64)
        for a in range(len(pts)):
            for b in range(a + 1, len(pts)):
                if math.hypot(*(pts[a] - pts[b])) < rule.min_dist_point:
                    problems.append(f"points {a} and {b} closer than {rule.min_dist_point}")
            if patch_rects is not None and len(patch_rects):
                for y0, x0, y1, x1 in patch_rects:
                    dy = max(y0 - pts[a, 0], 0, pts[a, 0] - (y1 - 1))
                    dx = max(x0 - pts[a, 1], 0, pts[a, 1] - (x1 - 1))
                    if math.hypot(dy, dx) < rule.min_dist_patch:
                        problems.append(f"point {a} within {rule.min_dist_patch} of a labeled patch")
                        break
    return problems


# ---------------------------------------------------------------- end to end


@dataclass
class StrataSummary:
    n_candidates: int
    n_valid: int
    n_components: int
    explained: float
    n_strata: int
    sse: float


def stratified_plan(grid: PatchGrid, reference, ref_res, config: StratifyConfig, rule: ExclusionRule,
                    n_points=200, fractions=(0.20, 0.05), basis="total", n_classes=8, point_mask=None,
                    features=None):
    """Featurize, reduce, cluster and split the candidate grid; then place assessment points.

    ``features`` may carry precomputed zonal histograms (``grid.valid`` must
    already reflect them) when many plans are drawn over one grid.
    """
    feats = zonal_histograms(grid, reference, ref_res, n_classes) if features is None else features
    ids = np.flatnonzero(grid.valid)
    if len(ids) < config.n_strata * config.samples_per_stratum:
        raise ValueError(f"{len(ids)} valid candidates cannot fill {config.n_strata} strata of "
                         f"{config.samples_per_stratum}")
    X = feats[ids]
    pca = pca_fit(X, config.pca_threshold)
    Z = pca_transform(pca, X)
    if Z.shape[1] == 0:
        assign, centroids, sse = np.zeros(len(ids), dtype=np.int64), np.zeros((1, 0)), 0.0
    else:
        km = kmeans(Z, config.n_strata, seed=config.seed)
        assign, centroids, sse = km.assignments, km.centroids, km.sse_history[-1]
    rng = np.random.default_rng(config.seed)
    plan = assign_folds(ids, assign, centroids, config, rng)
    plan.pretrain_ids, plan.pretrain_val_ids = pretrain_split(ids, plan.labeled_ids, fractions,
                                                              config.seed + 1, basis)
    rects = [grid.cell_rect(i) for i in plan.labeled_ids]
    if n_points:
        plan.points = sample_points((grid.width, grid.height), n_points, rule, rects, config.seed + 2,
                                    allowed=point_mask)
    summary = StrataSummary(len(grid), len(ids), pca.n_components,
                            float(pca.explained_variance_ratio.sum()) if pca.n_components else 1.0,
                            len(set(plan.fold_strata[0])), float(sse))
    return plan, summary


def extract_cells(raster, grid: PatchGrid, ids):
    """Stack the footprints of cells ``ids`` from a (C, H, W) or (H, W) raster."""
    out = []
    for i in ids:
        y0, x0, y1, x1 = grid.cell_rect(i)
        out.append(raster[..., y0:y1, x0:x1])
    if not out:
        shape = raster.shape[:-2] + (grid.patch, grid.patch)
        return np.zeros((0,) + shape, dtype=raster.dtype)
    return np.ascontiguousarray(np.stack(out))
