"""Stratification report: stratum census, skeleta, fibers, trisection profile, handle census."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .csfun import (
    CSFunction,
    Index,
    closure_probe,
    label,
    project_to_stratum,
    sample_stratum,
    strata_of,
    values as f_values,
)
from .geometry import Manifold, gauss_newton, project_batch, sample_points, tangent_projectors
from .rng import stream

PCA_NEIGHBORS = 20
EIGEN_GAP = 1e3
MIN_STRATUM_SAMPLES = 50


class FiberError(RuntimeError):
    pass


class FiberRangeError(FiberError):
    pass


class FiberSamplingError(FiberError):
    pass


# --------------------------------------------------------------------------
# Stratum census

@dataclass
class StratumEntry:
    J: Index
    sample_count: int
    dimension: Optional[int]  # None means insufficient data
    expected_dimension: int
    gap_fraction: float
    anchors_tested: int
    f_min: Optional[float]
    f_max: Optional[float]

    @property
    def status(self) -> str:
        return "insufficient data" if self.dimension is None else "ok"


@dataclass
class StratumCensus:
    strata: Dict[Index, StratumEntry]
    frontier: List[Tuple[Index, Index]]  # (T, S): S touches cl(M_T), S strictly contains T
    frontier_violations: List[Tuple[Index, Index]]
    points: np.ndarray = field(repr=False)
    labels: List[Index] = field(repr=False)
    m: int = 1

    def skeleta(self) -> List[np.ndarray]:
        return skeleta(self.labels, self.m)


def skeleta(labels: Sequence[Index], m: int) -> List[np.ndarray]:
    """Index arrays of X^i = {|I(x)| >= m - i + 1} for i = 0..m over a labelled sample."""
    sizes = np.array([len(J) for J in labels], dtype=int)
    return [np.flatnonzero(sizes >= m - i + 1) for i in range(m + 1)]


def pca_dimension(cloud: np.ndarray, gap: float = EIGEN_GAP, floor: float = 0.0) -> Tuple[Optional[int], float]:
    """Leading dimension d where eig_d / eig_(d+1) first reaches ``gap``; also the largest ratio.

    A cloud whose variance never exceeds ``floor`` is a point: dimension 0.
    """
    C = np.cov(cloud.T)
    ev = np.sort(np.linalg.eigvalsh(np.atleast_2d(C)))[::-1]
    if ev[0] <= floor:
        return 0, float("inf")
    ev = np.maximum(ev, 1e-300)
    ratios = ev[:-1] / ev[1:]
    hits = np.flatnonzero(ratios >= gap)
    return (int(hits[0]) + 1 if hits.size else None), float(ratios.max() if ratios.size else 0.0)


def _local_clouds(f, M, J, anchors, seed, radius, k):
    """k stratum neighbours per anchor by perturb-and-project at the given radius."""
    rng = stream(seed, "census", J)
    draws = 2 * k
    X0 = np.repeat(anchors, draws, axis=0) + radius * rng.standard_normal((len(anchors) * draws, M.n))
    X, ok = project_to_stratum(f, M, J, X0)
    near = np.linalg.norm(X - np.repeat(anchors, draws, axis=0), axis=1) <= 5 * radius * np.sqrt(M.n)
    ok &= near
    clouds = []
    for a in range(len(anchors)):
        sl = slice(a * draws, (a + 1) * draws)
        pts = X[sl][ok[sl]][:k]
        clouds.append(np.vstack([anchors[a : a + 1], pts]) if len(pts) == k else None)
    return clouds


def stratum_census(
    f: CSFunction,
    M: Manifold,
    n_samples: int,
    seed: int,
    anchors_per_stratum: int = 40,
    k: int = PCA_NEIGHBORS,
    radius: float = 1e-2,
    gap: float = EIGEN_GAP,
    frontier_probes: int = 8,
) -> StratumCensus:
    """Classify manifold samples by stratum and estimate each stratum's dimension.

    Generic samples almost never hit singular strata, so every stratum also
    gets anchors projected onto its closure, each with k local neighbours.
    The dimension of a stratum is the most common per-anchor PCA estimate.
    """
    pts = [sample_points(M, n_samples, seed, stream_name="census")]
    per_J: Dict[Index, List[np.ndarray]] = {}
    entries: Dict[Index, StratumEntry] = {}
    frontier, violations = set(), set()
    for J in f.subsets():
        anchors = sample_stratum(f, M, J, anchors_per_stratum, seed)
        clouds = [c for c in _local_clouds(f, M, J, anchors, seed, radius, k) if c is not None] if len(anchors) else []
        per_J[J] = clouds
        if clouds:
            pts.append(np.vstack(clouds))
        if len(J) >= 2:
            for x in anchors[:frontier_probes]:
                for j in J:
                    for drop in (False, True):
                        T = closure_probe(f, M, x, j, drop=drop)
                        if T is None:
                            continue
                        (frontier if set(T) < set(J) else violations).add((T, J))
    X = np.vstack(pts)
    labels = strata_of(f, X)
    vals = f_values(f, X)
    counts = Counter(labels)
    for J in f.subsets():
        expected = M.dim - (len(J) - 1)
        clouds = per_J[J]
        dims = [pca_dimension(c, gap, (1e-6 * radius) ** 2)[0] for c in clouds]
        good = [d for d in dims if d is not None]
        count = counts.get(J, 0)
        mask = np.array([L == J for L in labels])
        dim = Counter(good).most_common(1)[0][0] if good and count >= MIN_STRATUM_SAMPLES else None
        entries[J] = StratumEntry(
            J=J,
            sample_count=count,
            dimension=dim,
            expected_dimension=expected,
            gap_fraction=len(good) / len(clouds) if clouds else 0.0,
            anchors_tested=len(clouds),
            f_min=float(vals[mask].min()) if count else None,
            f_max=float(vals[mask].max()) if count else None,
        )
    return StratumCensus(entries, sorted(frontier, key=_pair_key), sorted(violations, key=_pair_key), X, labels, f.m)


def _pair_key(p):
    return (len(p[0]), p[0], len(p[1]), p[1])


# --------------------------------------------------------------------------
# Fibers

@dataclass
class FiberCensus:
    level: float
    n_samples: int
    per_stratum: Dict[Index, int]
    components: int
    component_sizes: List[int]
    eps: float
    median_nn: float
    is_regular: bool
    points: np.ndarray = field(repr=False)
    labels: List[Index] = field(repr=False)


def _level_system(f: CSFunction, M: Manifold, sel: int, t: float):
    def system(X):
        gv, gg, _ = M.jets(X, order=1)
        fv, fg, _ = f.jets(X, order=1)
        return (np.concatenate([gv, fv[:, sel : sel + 1] - t], axis=1),
                np.concatenate([gg, fg[:, sel : sel + 1]], axis=1))

    return system


def fiber_pool(f: CSFunction, M: Manifold, t: float, count: int, seed: int, max_rounds: int = 20) -> np.ndarray:
    """Points of f^{-1}(t): manifold samples pushed onto {f_i = t} for their active i, then reclassified."""
    out, got = [], 0
    for r in range(max_rounds):
        X0 = sample_points(M, max(count, 256), seed, stream_name=f"fiber-{t!r}-{r}")
        vals = f.values(X0)
        sel = np.argmax(f.sign * vals, axis=1)
        for i in range(f.m):
            rows = sel == i
            if not np.any(rows):
                continue
            X, conv, rank_ok = gauss_newton(_level_system(f, M, i, t), X0[rows], M.on_manifold_tol, 50)
            keep = conv & rank_ok & M.is_on(X)
            X = X[keep]
            if len(X):
                X = X[np.abs(f_values(f, X) - t) <= 1e-9]
            out.append(X)
            got += len(X)
        if got >= count:
            break
    return np.vstack(out)[:count] if out else np.zeros((0, M.n))


def farthest_point_sample(P: np.ndarray, count: int) -> np.ndarray:
    """Greedy max-min thinning; starts from the first point, so deterministic in input order."""
    if len(P) <= count:
        return P
    picks = np.empty(count, dtype=int)
    picks[0] = 0
    d = np.linalg.norm(P - P[0], axis=1)
    for s in range(1, count):
        i = int(np.argmax(d))
        picks[s] = i
        d = np.minimum(d, np.linalg.norm(P - P[i], axis=1))
    return P[np.sort(picks)]


def _level_distance(f: CSFunction, M: Manifold, Y: np.ndarray, t: float) -> np.ndarray:
    """First-order distance from points of M to the level set f = t."""
    fv, fg, _ = f.jets(Y, order=1)
    sel = np.argmax(f.sign * fv, axis=1)
    rows = np.arange(len(Y))
    P = tangent_projectors(M, Y)
    grad = np.einsum("bij,bj->bi", P, fg[rows, sel])
    return np.abs(fv[rows, sel] - t) / np.maximum(np.linalg.norm(grad, axis=1), 1e-12)


def count_components(f: CSFunction, M: Manifold, X: np.ndarray, t: float, eps_factor: float = 3.0):
    """Components of the eps-graph whose edges stay near the fiber at the chord midpoint.

    A chord between two sheets of the fiber passes through the gap, so its
    midpoint, pulled back onto M, sits far from the level set.
    Returns (labels, eps, median_nn).
    """
    tree = cKDTree(X)
    d, _ = tree.query(X, k=2)
    median_nn = float(np.median(d[:, 1]))
    eps = eps_factor * median_nn
    pairs = tree.query_pairs(eps, output_type="ndarray")
    if len(pairs):
        mid = 0.5 * (X[pairs[:, 0]] + X[pairs[:, 1]])
        Y, ok = project_batch(M, mid)
        dist = np.full(len(pairs), np.inf)
        dist[ok] = _level_distance(f, M, Y[ok], t)
        pairs = pairs[dist <= 0.5 * median_nn]
    A = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(X), len(X)))
    _, lab = connected_components(A, directed=False)
    return lab, eps, median_nn


def fiber_census(
    f: CSFunction,
    M: Manifold,
    t: float,
    n_samples: int = 2000,
    eps_factor: float = 3.0,
    seed: int = 0,
    value_range: Optional[Tuple[float, float]] = None,
    critical_values: Sequence[float] = (),
    pool_factor: int = 8,
    merge_tol: float = 1e-9,
) -> FiberCensus:
    t = float(t)
    if value_range is not None and not value_range[0] - merge_tol <= t <= value_range[1] + merge_tol:
        raise FiberRangeError(f"level {t} is outside the range [{value_range[0]:.12g}, {value_range[1]:.12g}] of f")
    pool = fiber_pool(f, M, t, pool_factor * n_samples, seed)
    if len(pool) == 0:
        if value_range is None:
            v = f_values(f, sample_points(M, 2000, seed, stream_name="range"))
            if t < v.min() or t > v.max():
                raise FiberRangeError(f"level {t} lies outside the sampled range [{v.min():.12g}, {v.max():.12g}]")
        raise FiberSamplingError(f"no point of the level set f = {t} was reached")
    X = farthest_point_sample(pool, n_samples)
    labels = strata_of(f, X)
    if len(X) < 2:
        comp, eps, mnn = np.zeros(len(X), dtype=int), 0.0, 0.0
    else:
        comp, eps, mnn = count_components(f, M, X, t, eps_factor)
    sizes = sorted(np.bincount(comp).tolist(), reverse=True)
    per = Counter(labels)
    return FiberCensus(
        level=t,
        n_samples=len(X),
        per_stratum={J: per.get(J, 0) for J in f.subsets()},
        components=len(sizes),
        component_sizes=sizes,
        eps=eps,
        median_nn=mnn,
        is_regular=all(abs(t - c) > merge_tol for c in critical_values),
        points=X,
        labels=labels,
    )


def grid_levels(critical_vals: Sequence[float], k: int) -> List[float]:
    """k levels spread over the regular intervals, evenly spaced inside each interval."""
    cv = sorted(critical_vals)
    if k < 1:
        raise ValueError("grid size must be positive")
    if len(cv) < 2:
        raise ValueError("need at least two critical values to form a regular interval")
    q = len(cv) - 1
    per = [k // q + (1 if i < k % q else 0) for i in range(q)]
    out = []
    for (a, b), p in zip(zip(cv[:-1], cv[1:]), per):
        out.extend(a + (j + 0.5) * (b - a) / p for j in range(p))
    return out


def write_point_cloud(path, X: np.ndarray, labels: Sequence[Index], level: float) -> None:
    n = X.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(1, n + 1)] + ["stratum", "level"])
        for x, J in zip(X, labels):
            w.writerow([repr(float(v)) for v in x] + [label(J), repr(float(level))])


# --------------------------------------------------------------------------
# Trisection profile

@dataclass
class TrisectionVerdict:
    applies: bool
    g: Optional[int]
    k: Optional[int]
    checklist: List[Tuple[str, bool, str]]
    evidence: str = ""

    @property
    def reasons(self) -> List[str]:
        return [f"{name}: {detail}" for name, ok, detail in self.checklist if not ok]


def restriction_profile(search) -> Dict[Index, Counter]:
    """Index counts of critical points of each restriction f|M_J.

    Clarke critical points contribute their restriction index; points with a
    multiplier outside the simplex are critical for f|M_J only.
    """
    prof: Dict[Index, Counter] = {}
    for r in search.records:
        idx = r.handle.m_param if r.handle is not None else r.nondegeneracy.quadratic_index
        prof.setdefault(r.J, Counter())[idx] += 1
    for p in search.restriction_points:
        prof.setdefault(p.J, Counter())[p.index] += 1
    return prof


def trisection_check(f: CSFunction, M: Manifold, search, budget: Optional[int] = None) -> TrisectionVerdict:
    checks: List[Tuple[str, bool, str]] = []
    checks.append(("manifold dimension 4", M.dim == 4, f"dimension is {M.dim}"))
    checks.append(("three selections", f.m == 3, f"m = {f.m}"))
    nondeg = not search.degenerate_sets and all(r.nondegeneracy.nondegenerate for r in search.records)
    checks.append(("all critical points nondegenerate", nondeg,
                   f"{len(search.degenerate_sets)} degenerate sets"))
    if not all(ok for _, ok, _ in checks):
        return TrisectionVerdict(False, None, None, checks, _evidence(budget))
    prof = restriction_profile(search)
    ks, gs = [], []
    for J in f.subsets():
        c = prof.get(J, Counter())
        desc = ", ".join(f"index {i}: {n}" for i, n in sorted(c.items(), key=lambda kv: (kv[0] is None, kv[0]))) or "none"
        if len(J) == 3:
            continue
        top, low = 5 - len(J), 4 - len(J)
        if f.selector == "min":
            # min f_i = -max(-f_i): indices on each stratum are mirrored
            top, low = 0, 1
        others = sum(n for i, n in c.items() if i not in (top, low))
        ok = c.get(top, 0) == 1 and others == 0
        checks.append((f"f|M_{label(J)} profile", ok, desc))
        (ks if len(J) == 1 else gs).append(c.get(low, 0))
    checks.append(("k agrees across regular strata", len(set(ks)) == 1, f"k counts {ks}"))
    checks.append(("g agrees across 2-strata", len(set(gs)) == 1, f"g counts {gs}"))
    applies = all(ok for _, ok, _ in checks)
    g, k = (gs[0], ks[0]) if applies else (None, None)
    if applies and g < k:
        checks.append(("0 <= k <= g", False, f"g = {g}, k = {k}"))
        applies, g, k = False, None, None
    return TrisectionVerdict(applies, g, k, checks, _evidence(budget))


def _evidence(budget) -> str:
    b = "unspecified" if budget is None else f"{budget} starts per active set"
    return f"no counterexample found under budget {b}"


# --------------------------------------------------------------------------
# Handle census

def handle_template(g: int, k: int) -> Dict[str, int]:
    t = {
        "trisected-0": 1, "trisected-1": 2 * g, "trisected-2": 1,
        "bisected-2": 3 * g, "bisected-3": 3, "smooth-3": 3 * k, "smooth-4": 3,
    }
    return {key: v for key, v in t.items() if v}


@dataclass
class HandleCensus:
    counts: Dict[str, int]
    template: Optional[Dict[str, int]]
    mismatches: List[str]
    symmetric: Optional[bool]
    verdict: str


def handle_census(records, g: Optional[int] = None, k: Optional[int] = None) -> HandleCensus:
    hs = [(r.J, r.handle) for r in records if r.handle is not None]
    if not hs:
        return HandleCensus({}, None, [], None, "not applicable")
    counts = Counter(f"{h.kind}-{h.total_index}" for _, h in hs)
    counts = dict(sorted(counts.items()))
    # orbit check: within each kind and index, every stratum of that size carries the same count
    per_stratum: Dict[Tuple[str, int], Counter] = {}
    for J, h in hs:
        per_stratum.setdefault((h.kind, h.total_index), Counter())[J] += 1
    symmetric = True
    for (kind, _), c in per_stratum.items():
        if kind == "trisected":
            continue
        if sum(c.values()) % 3 or len(set(c.values())) != 1 or len(c) != 3:
            symmetric = False
    template = handle_template(g, k) if g is not None and k is not None else None
    mismatches = []
    if template is not None:
        for key in sorted(set(template) | set(counts)):
            if template.get(key, 0) != counts.get(key, 0):
                mismatches.append(f"{key}: expected {template.get(key, 0)}, found {counts.get(key, 0)}")
        verdict = "matches template" if not mismatches else "template mismatch"
    else:
        verdict = "no template"
    return HandleCensus(counts, template, mismatches, symmetric, verdict)
