"""Exhaustive multistart search for critical points of a CS function on M.

For each nonempty index set J, random starts on M are driven by damped
Newton to solutions of the KKT-type system

    sum_i lam_i grad f_i + sum_k mu_k grad g_k = 0
    f_i - f_j0 = 0          (i in J minus j0)
    g_k = 0
    sum_i lam_i - 1 = 0

Converged solutions with lam >= 0 and active set exactly J are Clarke
critical points. Solutions with a negative multiplier are still critical
points of the restriction f|M_J and are kept separately for the trisection
profile check.
"""

from __future__ import annotations

import concurrent.futures as cf
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .csfun import CSFunction, Index, active_mask, label, values as f_values
from .expr import ExprDomainError
from .geometry import Manifold, sample_points
from .nonsmooth import (
    CRIT_TOL,
    ND2_TOL,
    HandleClass,
    NondegeneracyReport,
    SimplexWeights,
    classify_handle,
    criticality,
    nondegeneracy,
)
from .rng import stream

LAMBDA_FLOOR = -1e-10
REGULAR_ROOT_RATIO = 1e-3
PROBE_STEP = 0.1


@dataclass
class SearchConfig:
    starts_per_subset: int = 200
    seed: int = 0
    dedupe_radius: float = 1e-6
    degenerate_cluster_diameter: float = 1e-2
    cluster_link_radius: float = 1.0
    newton_max_iter: int = 100
    newton_tol: float = 1e-11
    max_backtracks: int = 30
    backtrack_factor: float = 0.5
    crit_tol: float = CRIT_TOL
    nd2_tol: float = ND2_TOL
    value_merge_tol: float = 1e-6
    jobs: int = 1

    def __post_init__(self):
        if self.starts_per_subset < 1 or self.newton_max_iter < 1 or self.jobs < 1:
            raise ValueError("counts must be positive")
        for name in ("dedupe_radius", "degenerate_cluster_diameter", "cluster_link_radius",
                     "newton_tol", "crit_tol", "nd2_tol", "value_merge_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must lie in (0, 1)")


@dataclass
class CriticalPointRecord:
    x: np.ndarray
    J: Index
    lam: SimplexWeights
    mu: np.ndarray
    value: float
    nondegeneracy: NondegeneracyReport
    handle: Optional[HandleClass]
    cluster_size: int
    residual: float
    min_norm: float
    warnings: List[str] = field(default_factory=list)


@dataclass
class DegenerateSet:
    J: Index
    value: float
    diameter: float
    members: int
    representatives: np.ndarray
    max_residual: float
    reason: str = "suspected non-isolated critical set"
    members_x: np.ndarray = field(default=None, repr=False)


@dataclass
class RestrictionPoint:
    """Critical point of f|M_J whose multipliers leave the simplex."""

    x: np.ndarray
    J: Index
    lam: np.ndarray
    value: float
    index: Optional[int]


@dataclass
class RawSolutions:
    J: Index
    X: np.ndarray
    LAM: np.ndarray
    MU: np.ndarray
    values: np.ndarray
    residuals: np.ndarray
    degenerate: np.ndarray


@dataclass
class SearchResult:
    records: List[CriticalPointRecord]
    degenerate_sets: List[DegenerateSet]
    restriction_points: List[RestrictionPoint]
    diagnostics: Dict[str, dict]

    @property
    def cs_morse(self) -> bool:
        return not self.degenerate_sets and all(r.nondegeneracy.nondegenerate for r in self.records)


# --------------------------------------------------------------------------
# KKT system

def _kkt_batch(f: CSFunction, M: Manifold, J: Index, Z: np.ndarray, jacobian: bool = True):
    n, k, c = M.n, len(J), M.c
    X, LAM, MU = Z[:, :n], Z[:, n : n + k], Z[:, n + k :]
    sel = [j - 1 for j in J]
    order = 2 if jacobian else 1
    fv, fg, fh = f.jets(X, order=order)
    gv, gg, gh = M.jets(X, order=order)
    fv, fg = fv[:, sel], fg[:, sel]
    stat = np.einsum("bk,bkn->bn", LAM, fg) + np.einsum("bk,bkn->bn", MU, gg)
    R = np.concatenate(
        [stat, fv[:, 1:] - fv[:, :1], gv, LAM.sum(axis=1, keepdims=True) - 1.0], axis=1
    )
    if not jacobian:
        return R, None
    B, N = len(Z), n + k + c
    Jac = np.zeros((B, N, N))
    Jac[:, :n, :n] = np.einsum("bk,bkij->bij", LAM, fh[:, sel]) + np.einsum("bk,bkij->bij", MU, gh)
    Jac[:, :n, n : n + k] = np.swapaxes(fg, 1, 2)
    Jac[:, :n, n + k :] = np.swapaxes(gg, 1, 2)
    Jac[:, n : n + k - 1, :n] = fg[:, 1:] - fg[:, :1]
    Jac[:, n + k - 1 : n + k - 1 + c, :n] = gg
    Jac[:, N - 1, n : n + k] = 1.0
    return R, Jac


def kkt_residual(f: CSFunction, M: Manifold, J: Index, x, lam, mu) -> np.ndarray:
    """Stationarity (n), value ties (|J|-1), constraints (c), simplex sum (1)."""
    Z = np.concatenate([np.asarray(x, float), np.asarray(lam, float), np.asarray(mu, float)])
    return _kkt_batch(f, M, tuple(J), Z[None], jacobian=False)[0][0]


def _safe_kkt(f, M, J, Z, jacobian):
    """Batched KKT evaluation; rows hitting a domain error come back as NaN."""
    try:
        return _kkt_batch(f, M, J, Z, jacobian)
    except ExprDomainError:
        N = Z.shape[1]
        R = np.full((len(Z), N), np.nan)
        Jac = np.full((len(Z), N, N), np.nan) if jacobian else None
        for i in range(len(Z)):
            try:
                r, jac = _kkt_batch(f, M, J, Z[i : i + 1], jacobian)
                R[i] = r[0]
                if jacobian:
                    Jac[i] = jac[0]
            except ExprDomainError:
                pass
        return R, Jac


def _min_norm_steps(Jac: np.ndarray, R: np.ndarray) -> np.ndarray:
    """-pinv(Jac) R per row; the pseudo-inverse copes with singular systems."""
    U, s, Vt = np.linalg.svd(Jac)
    keep = s > 1e-12 * np.maximum(s[:, :1], 1e-300)
    inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return -np.einsum("bkn,bk->bn", Vt, inv * np.einsum("bpk,bp->bk", U, R))


def damped_newton(f: CSFunction, M: Manifold, J: Index, Z0: np.ndarray, cfg: SearchConfig,
                  frozen: Optional[np.ndarray] = None):
    """Backtracking Newton on the KKT residual. Returns (Z, converged, residual_inf).

    ``frozen`` masks unknowns held at their start values (their Jacobian
    columns are zeroed, so the min-norm step leaves them alone).
    """
    Z = np.array(Z0, dtype=float, copy=True)
    B = len(Z)
    conv = np.zeros(B, dtype=bool)
    alive = np.ones(B, dtype=bool)
    res = np.full(B, np.inf)
    for _ in range(cfg.newton_max_iter + 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        R, Jac = _safe_kkt(f, M, J, Z[idx], True)
        finite = np.all(np.isfinite(R), axis=1) & np.all(np.isfinite(Jac), axis=(1, 2))
        alive[idx[~finite]] = False
        idx, R, Jac = idx[finite], R[finite], Jac[finite]
        rinf = np.max(np.abs(R), axis=1)
        res[idx] = rinf
        done = rinf <= cfg.newton_tol
        conv[idx[done]] = True
        alive[idx[done]] = False
        idx, R, Jac = idx[~done], R[~done], Jac[~done]
        if idx.size == 0:
            break
        if frozen is not None:
            Jac[:, :, frozen] = 0.0
        step = _min_norm_steps(Jac, R)
        r0 = np.linalg.norm(R, axis=1)
        t = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        for _ in range(cfg.max_backtracks + 1):
            p = np.flatnonzero(pending)
            if p.size == 0:
                break
            trial = Z[idx[p]] + t[p, None] * step[p]
            Rt, _ = _safe_kkt(f, M, J, trial, False)
            rt = np.linalg.norm(Rt, axis=1)
            ok = np.isfinite(rt) & (rt < (1.0 - 1e-4 * t[p]) * r0[p])
            Z[idx[p[ok]]] = trial[ok]
            pending[p[ok]] = False
            t[p[~ok]] *= cfg.backtrack_factor
        # no acceptable step after all backtracks: the start is abandoned
        alive[idx[pending]] = False
    return Z, conv, res


# --------------------------------------------------------------------------
# Per-subset search

def _starts(f: CSFunction, M: Manifold, J: Index, cfg: SearchConfig) -> np.ndarray:
    X = sample_points(M, cfg.starts_per_subset, cfg.seed, stream_name=f"search-{label(J)}")
    k = len(J)
    # uniform on the open simplex, so non-unique multipliers show up as spread
    LAM = stream(cfg.seed, "search-lambda", label(J)).dirichlet(np.ones(k), size=len(X))
    if M.c:
        _, fg, _ = f.jets(X, order=1)
        _, gg, _ = M.jets(X, order=1)
        comb = np.einsum("bk,bkn->bn", LAM, fg[:, [j - 1 for j in J]])
        MU = np.stack([np.linalg.lstsq(gg[b].T, -comb[b], rcond=None)[0] for b in range(len(X))])
    else:
        MU = np.zeros((len(X), 0))
    return np.concatenate([X, LAM, MU], axis=1)


def _exact_and_feasible(f, J, X, LAM, conv):
    exact = np.zeros(len(X), dtype=bool)
    if np.any(conv):
        mask = active_mask(f, X[conv])
        want = np.zeros(f.m, dtype=bool)
        want[[j - 1 for j in J]] = True
        exact[np.flatnonzero(conv)] = np.all(mask == want, axis=1)
    return exact, np.all(LAM >= LAMBDA_FLOOR, axis=1)


def regular_roots(f: CSFunction, M: Manifold, J: Index, Z: np.ndarray):
    """Certify isolated roots: |R| <= REGULAR_ROOT_RATIO * smin(Jac)^2.

    Near a regular root Newton converges quadratically and the root is
    unique within a ball of radius ~ smin / L, so a residual far below
    smin^2 pins the solution. Singular roots (continua, double ties) fail.
    Returns (certified mask, smallest singular value, null vectors).
    """
    if len(Z) == 0:
        return np.zeros(0, dtype=bool), np.zeros(0), np.zeros((0, Z.shape[1]))
    R, Jac = _kkt_batch(f, M, J, Z)
    _, s, Vt = np.linalg.svd(Jac)
    smin = s[:, -1]
    return np.linalg.norm(R, axis=1) <= REGULAR_ROOT_RATIO * smin ** 2, smin, Vt[:, -1]


def _probe_multipliers(f, M, J, Z, null, cfg):
    """Slide the multipliers of singular roots along the Jacobian null vector.

    With the multipliers frozen at the shifted value, Newton re-solves for
    (x, mu). An isolated root admits no solution there; a root whose
    multiplier set is a continuum converges to a joint point a real
    distance away, and such points join the raw sample.
    """
    n, k = M.n, len(J)
    if len(Z) == 0 or k < 2:
        return Z[:0]
    v = null[:, n : n + k]
    v = v - v.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(v, axis=1)
    ok = norm > 1e-3
    Z, v = Z[ok], v[ok] / norm[ok, None]
    h = PROBE_STEP
    trials = np.concatenate([Z, Z])
    trials[:, n : n + k] += np.concatenate([h * v, -h * v])
    origin = np.concatenate([Z, Z])
    frozen = np.zeros(Z.shape[1], dtype=bool)
    frozen[n : n + k] = True
    Zc, conv, _ = damped_newton(f, M, J, trials, cfg, frozen=frozen)
    exact, lam_ok = _exact_and_feasible(f, J, Zc[:, :n], Zc[:, n : n + k], conv)
    same = np.zeros(len(Zc), dtype=bool)
    if np.any(conv):
        c = np.flatnonzero(conv)
        same[c] = np.abs(f_values(f, Zc[c, :n]) - f_values(f, origin[c, :n])) <= cfg.value_merge_tol
    keep = conv & exact & lam_ok & same & (np.linalg.norm(Zc - origin, axis=1) >= 0.5 * h)
    return Zc[keep]


def _search_subset(f: CSFunction, M: Manifold, J: Index, cfg: SearchConfig):
    n, k = M.n, len(J)
    Z0 = _starts(f, M, J, cfg)
    Z, conv, res = damped_newton(f, M, J, Z0, cfg)
    diag = {"starts": len(Z0), "converged": int(conv.sum()), "not_converged": int((~conv).sum())}

    exact, lam_ok = _exact_and_feasible(f, J, Z[:, :n], Z[:, n : n + k], conv)
    diag["active_set_mismatch"] = int((conv & ~exact).sum())
    diag["negative_multiplier"] = int((conv & exact & ~lam_ok).sum())
    keep = conv & exact & lam_ok
    diag["accepted"] = int(keep.sum())

    def raw(Zs, resid):
        Xs, L, U = Zs[:, :n], Zs[:, n : n + k], Zs[:, n + k :]
        vals = f_values(f, Xs) if len(Xs) else np.zeros(0)
        cert, _, null = regular_roots(f, M, J, Zs)
        nd = np.array([nondegeneracy(f, M, x, J, l, m, cfg.nd2_tol).nondegenerate
                       for x, l, m in zip(Xs, L, U)], dtype=bool)
        return RawSolutions(J, Xs, L, U, vals, resid, ~(nd & cert)), null

    acc, null = raw(Z[keep], res[keep])
    extra = _probe_multipliers(f, M, J, Z[keep][acc.degenerate], null[acc.degenerate], cfg)
    diag["multiplier_probe_hits"] = len(extra)
    if len(extra):
        R, _ = _kkt_batch(f, M, J, extra, jacobian=False)
        more, _ = raw(extra, np.max(np.abs(R), axis=1))
        more.degenerate[:] = True
        acc = RawSolutions(J, *(np.concatenate([getattr(acc, a), getattr(more, a)])
                                for a in ("X", "LAM", "MU", "values", "residuals", "degenerate")))
    neg, _ = raw(Z[conv & exact & ~lam_ok], res[conv & exact & ~lam_ok])
    return acc, neg, diag


# --------------------------------------------------------------------------
# Clustering

def _single_linkage(points: np.ndarray, radius: float) -> np.ndarray:
    """Component label per row of the radius graph (labels in first-seen order)."""
    from scipy.sparse.csgraph import connected_components
    from scipy.spatial import cKDTree

    if len(points) == 0:
        return np.zeros(0, dtype=int)
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    from scipy.sparse import coo_matrix

    A = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(points),) * 2)
    _, lab = connected_components(A, directed=False)
    # relabel by first occurrence for deterministic ordering
    order = {}
    return np.array([order.setdefault(l, len(order)) for l in lab], dtype=int)


def _diameter(P: np.ndarray) -> float:
    if len(P) < 2:
        return 0.0
    from scipy.spatial.distance import pdist

    return float(pdist(P).max())


def _spread(P: np.ndarray, count: int = 5) -> np.ndarray:
    """Farthest-point pick of up to ``count`` representatives."""
    picks = [0]
    d = np.linalg.norm(P - P[0], axis=1)
    while len(picks) < min(count, len(P)):
        i = int(np.argmax(d))
        if d[i] == 0:
            break
        picks.append(i)
        d = np.minimum(d, np.linalg.norm(P - P[i], axis=1))
    return P[picks]


def detect_degenerate_sets(raw: RawSolutions, cfg: SearchConfig):
    """Flag continua among degenerate solutions.

    Nondegenerate critical points are isolated, so only degenerate solutions
    are linked: single linkage in joint (x, lam, mu) space with radius
    cluster_link_radius, within groups of equal value. A cluster wider than
    degenerate_cluster_diameter is reported and produces no record; narrower
    clusters are returned as member index arrays for ordinary deduplication.
    """
    flags: List[DegenerateSet] = []
    tight: List[np.ndarray] = []
    idx = np.flatnonzero(raw.degenerate)
    if idx.size == 0:
        return flags, tight
    joint = np.concatenate([raw.X, raw.LAM, raw.MU], axis=1)[idx]
    vals = raw.values[idx]
    vgroups = _single_linkage(vals[:, None], cfg.value_merge_tol)
    for g in range(vgroups.max() + 1):
        members = idx[vgroups == g]
        lab = _single_linkage(joint[vgroups == g], cfg.cluster_link_radius)
        for c in range(lab.max() + 1):
            mem = members[lab == c]
            P = np.concatenate([raw.X, raw.LAM, raw.MU], axis=1)[mem]
            diam = _diameter(P)
            if diam > cfg.degenerate_cluster_diameter:
                flags.append(DegenerateSet(
                    J=raw.J,
                    value=float(np.median(raw.values[mem])),
                    diameter=diam,
                    members=len(mem),
                    representatives=_spread(raw.X[mem]),
                    max_residual=float(raw.residuals[mem].max()),
                    members_x=raw.X[mem],
                ))
            else:
                tight.append(mem)
    return flags, tight


def _dedupe(X: np.ndarray, radius: float) -> List[np.ndarray]:
    """Greedy grouping in input order: each point joins the first representative within radius."""
    reps: List[int] = []
    groups: List[List[int]] = []
    for i, x in enumerate(X):
        for g, r in enumerate(reps):
            if np.linalg.norm(x - X[r]) <= radius:
                groups[g].append(i)
                break
        else:
            reps.append(i)
            groups.append([i])
    return [np.array(g) for g in groups]


def _polish(f, M, J, z, cfg, iters=8):
    tight = SearchConfig(**{**cfg.__dict__, "newton_tol": 1e-15, "newton_max_iter": iters, "jobs": 1})
    Z, _, _ = damped_newton(f, M, J, z[None], tight)
    return Z[0]


def _make_record(f, M, J, z, size, cfg, warnings=()) -> Optional[CriticalPointRecord]:
    n, k = M.n, len(J)
    z = _polish(f, M, J, z, cfg)
    x, lam, mu = z[:n], z[n : n + k], z[n + k :]
    res = float(np.max(np.abs(_kkt_batch(f, M, J, z[None], jacobian=False)[0])))
    verdict = criticality(f, M, x, cfg.crit_tol, J=J)
    lam_c = np.clip(lam, 0.0, None)
    lam_c = lam_c / lam_c.sum()
    nd = nondegeneracy(f, M, x, J, lam, mu, cfg.nd2_tol)
    rec = CriticalPointRecord(
        x=x, J=J, lam=SimplexWeights(J, lam_c), mu=mu, value=float(f_values(f, x)[0]),
        nondegeneracy=nd, handle=None, cluster_size=int(size), residual=res,
        min_norm=verdict.min_norm_value, warnings=list(warnings) + verdict.warnings,
    )
    if nd.nondegenerate:
        rec.handle = classify_handle(f, M, rec)
    return rec


def _process_subset(f: CSFunction, M: Manifold, J: Index, cfg: SearchConfig):
    acc, neg, diag = _search_subset(f, M, J, cfg)
    flags, tight = detect_degenerate_sets(acc, cfg)
    zs = np.concatenate([acc.X, acc.LAM, acc.MU], axis=1)
    flagged = np.vstack([d.members_x for d in flags]) if flags else np.zeros((0, M.n))
    nondeg = np.flatnonzero(~acc.degenerate)
    if len(flagged) and nondeg.size:
        # a nondegenerate point has unique multipliers and cannot sit on a continuum;
        # such hits are rounding noise on a flagged set
        d = np.min(np.linalg.norm(acc.X[nondeg, None] - flagged[None], axis=2), axis=1)
        diag["absorbed_into_degenerate_set"] = int((d <= cfg.dedupe_radius).sum())
        nondeg = nondeg[d > cfg.dedupe_radius]
    groups = [nondeg[g] for g in _dedupe(acc.X[nondeg], cfg.dedupe_radius)]
    rest = np.concatenate(tight) if tight else np.zeros(0, dtype=int)
    groups += [rest[g] for g in _dedupe(acc.X[rest], cfg.dedupe_radius)]
    records = [_make_record(f, M, J, zs[mem[0]], len(mem), cfg) for mem in groups]
    diag["records"] = len(records)
    diag["degenerate_sets"] = len(flags)

    restriction = []
    for g in _dedupe(neg.X, cfg.dedupe_radius):
        i = g[0]
        nd = nondegeneracy(f, M, neg.X[i], J, neg.LAM[i], neg.MU[i], cfg.nd2_tol)
        restriction.append(RestrictionPoint(neg.X[i], J, neg.LAM[i], float(neg.values[i]), nd.quadratic_index))
    return records, flags, restriction, diag


def _sort_key(rec):
    return (len(rec.J), rec.J, round(rec.value, 9), tuple(np.round(rec.x, 9)))


def find_critical_points(f: CSFunction, M: Manifold, cfg: Optional[SearchConfig] = None) -> SearchResult:
    cfg = cfg or SearchConfig()
    if f.n != M.n:
        raise ValueError("selection and manifold dimensions differ")
    subsets = f.subsets()
    if cfg.jobs > 1:
        with cf.ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            outs = list(ex.map(_process_subset, [f] * len(subsets), [M] * len(subsets), subsets, [cfg] * len(subsets)))
    else:
        outs = [_process_subset(f, M, J, cfg) for J in subsets]
    records, flags, restriction, diagnostics = [], [], [], {}
    for J, (r, fl, rp, d) in zip(subsets, outs):
        records.extend(r)
        flags.extend(fl)
        restriction.extend(rp)
        diagnostics[label(J)] = d
    records.sort(key=_sort_key)
    flags.sort(key=lambda s: (len(s.J), s.J, round(s.value, 9)))
    restriction.sort(key=_sort_key)
    return SearchResult(records, flags, restriction, diagnostics)


def critical_values(records: Sequence, degenerate_sets: Sequence = (), tol: float = 1e-9) -> List[float]:
    vals = sorted([r.value for r in records] + [d.value for d in degenerate_sets])
    out: List[float] = []
    for v in vals:
        if not out or v - out[-1] > tol:
            out.append(v)
    return out
