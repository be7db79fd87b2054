"""Continuous selections f = max{f_1..f_m} or min{f_1..f_m} and their strata."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .expr import Expression, evaluate_many
from .geometry import Manifold, gauss_newton, project_batch, sample_points, tangent_projectors

Index = Tuple[int, ...]  # sorted, 1-based selection indices


class CSValidationError(ValueError):
    pass


@dataclass(frozen=True)
class CSFunction:
    selections: Tuple[Expression, ...]
    selector: str = "max"
    active_tol: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "selections", tuple(self.selections))
        if not self.selections:
            raise ValueError("need at least one selection function")
        if self.selector not in ("max", "min"):
            raise ValueError(f"selector must be 'max' or 'min', got {self.selector!r}")
        if len({e.n for e in self.selections}) != 1:
            raise ValueError("selection functions must share the ambient dimension")
        if not self.active_tol > 0:
            raise ValueError("active_tol must be positive")

    @property
    def m(self) -> int:
        return len(self.selections)

    @property
    def n(self) -> int:
        return self.selections[0].n

    @property
    def sign(self) -> float:
        """+1 for max, -1 for min: sign * f is always a max-selection."""
        return 1.0 if self.selector == "max" else -1.0

    def jets(self, X, order: int = 2):
        return evaluate_many(self.selections, X, order=order)

    def values(self, X) -> np.ndarray:
        return self.jets(X, order=0)[0]

    def subsets(self) -> List[Index]:
        """All nonempty index sets, ordered by size then lexicographically."""
        idx = range(1, self.m + 1)
        return [J for k in range(1, self.m + 1) for J in itertools.combinations(idx, k)]


def _select(f: CSFunction, vals: np.ndarray) -> np.ndarray:
    return vals.max(axis=-1) if f.selector == "max" else vals.min(axis=-1)


def value(f: CSFunction, x) -> float:
    return float(_select(f, f.values(np.atleast_2d(x)))[0])


def values(f: CSFunction, X) -> np.ndarray:
    return _select(f, f.values(np.atleast_2d(X)))


def gaps(f: CSFunction, vals: np.ndarray) -> np.ndarray:
    """Nonnegative margins |f(x) - f_j(x)| oriented by the selector."""
    return f.sign * (_select(f, vals)[..., None] - vals)


def active_mask(f: CSFunction, X) -> np.ndarray:
    """Boolean (B, m) membership of each selection in the active set."""
    return gaps(f, f.values(np.atleast_2d(X))) <= f.active_tol


@dataclass(frozen=True)
class ActiveSet:
    indices: Index
    values: np.ndarray = field(repr=False)
    witness_gap: float
    ambiguous: bool  # an inactive margin lies within 10x active_tol


def active_set(f: CSFunction, x) -> ActiveSet:
    vals = f.values(np.atleast_2d(x))[0]
    gap = gaps(f, vals)
    mask = gap <= f.active_tol
    J = tuple(int(i) + 1 for i in np.flatnonzero(mask))
    witness = float(gap[~mask].min()) if np.any(~mask) else float("inf")
    return ActiveSet(J, vals, witness, witness <= 10.0 * f.active_tol)


def stratum_of(f: CSFunction, x) -> Index:
    return active_set(f, x).indices


def strata_of(f: CSFunction, X) -> List[Index]:
    mask = active_mask(f, X)
    return [tuple(int(i) + 1 for i in np.flatnonzero(row)) for row in mask]


def label(J: Sequence[int]) -> str:
    return "-".join(str(j) for j in J)


def parse_label(s: str) -> Index:
    return tuple(sorted(int(p) for p in s.split("-")))


# --------------------------------------------------------------------------
# Projection onto stratum closures

def stratum_system(f: CSFunction, M: Manifold, J: Index, extra=None):
    """Residual system {g = 0, f_i - f_j0 = 0 (i in J minus j0)} plus optional extra rows."""
    sel = [j - 1 for j in J]

    def system(X):
        gv, gg, _ = M.jets(X, order=1)
        fv, fg, _ = f.jets(X, order=1)
        R = [gv, fv[:, sel[1:]] - fv[:, sel[:1]]]
        D = [gg, fg[:, sel[1:]] - fg[:, sel[:1]]]
        if extra is not None:
            er, ed = extra(X, fv, fg)
            R.append(er)
            D.append(ed)
        return np.concatenate(R, axis=1), np.concatenate(D, axis=1)

    return system


def project_to_stratum(f: CSFunction, M: Manifold, J: Index, X0, max_iter: int = 50, exact: bool = True):
    """Newton-project rows of X0 onto cl(M_J); with ``exact`` keep only landings in M_J."""
    from .expr import ExprDomainError

    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    try:
        X, conv, rank_ok = gauss_newton(stratum_system(f, M, J), X0, M.on_manifold_tol, max_iter)
    except ExprDomainError:
        return X0.copy(), np.zeros(len(X0), dtype=bool)
    ok = conv & rank_ok & M.is_on(X)
    if exact and np.any(ok):
        mask = active_mask(f, X[ok])
        want = np.zeros(f.m, dtype=bool)
        want[[j - 1 for j in J]] = True
        ok[np.flatnonzero(ok)[~np.all(mask == want, axis=1)]] = False
    return X, ok


def sample_stratum(f: CSFunction, M: Manifold, J: Index, count: int, seed: int, max_rounds: int = 20) -> np.ndarray:
    """Points of M_J from box draws projected first onto M, then onto cl(M_J)."""
    if count <= 0:
        return np.zeros((0, M.n))
    out, got = [], 0
    for r in range(max_rounds):
        X0 = sample_points(M, max(2 * count, 64), seed, stream_name=f"stratum-{label(J)}-{r}")
        X, ok = project_to_stratum(f, M, J, X0)
        out.append(X[ok])
        got += int(ok.sum())
        if got >= count:
            break
    return np.concatenate(out)[:count] if out else np.zeros((0, M.n))


# --------------------------------------------------------------------------
# Validation

@dataclass
class Violation:
    point: List[float]
    active: Index
    condition: float


@dataclass
class ValidationReport:
    probes: int
    multi_active_probes: int
    worst_condition: Optional[float]
    violations: List[Violation]

    @property
    def ok(self) -> bool:
        return not self.violations


def affine_condition(f: CSFunction, M: Manifold, X: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Smallest normalised singular value of the projected gradient differences.

    Zero (up to rounding) means the active gradients on T_xM are affinely
    dependent; points with a single active selection get +inf.
    """
    out = np.full(len(X), np.inf)
    multi = masks.sum(axis=1) >= 2
    if not np.any(multi):
        return out
    Xm = X[multi]
    _, G, _ = f.jets(Xm, order=1)
    P = tangent_projectors(M, Xm)
    PG = np.einsum("bij,bmj->bmi", P, G)
    scale = np.maximum(1.0, np.linalg.norm(G, axis=2).max(axis=1))
    conds = []
    for k, row in enumerate(masks[multi]):
        act = np.flatnonzero(row)
        D = PG[k, act[1:]] - PG[k, act[:1]]
        s = np.linalg.svd(D, compute_uv=False)
        conds.append(s[-1] / scale[k])
    out[multi] = conds
    return out


def validate_cs(f: CSFunction, M: Manifold, probe_count: int, seed: int, rank_tol: float = 1e-8) -> ValidationReport:
    """Probe affine independence of active gradients.

    Generic samples almost never see two active selections, so each index set
    with |J| >= 2 also receives targeted probes projected onto cl(M_J).
    """
    if f.n != M.n:
        raise CSValidationError(f"selections are over R^{f.n}, manifold over R^{M.n}")
    pts = [sample_points(M, probe_count, seed, stream_name="validate")]
    multi = [J for J in f.subsets() if len(J) >= 2]
    per = max(1, probe_count // max(1, 2 * len(multi))) if multi else 0
    for J in multi:
        seeds = sample_points(M, per, seed, stream_name=f"validate-{label(J)}")
        X, ok = project_to_stratum(f, M, J, seeds, exact=False)
        pts.append(X[ok])
    X = np.concatenate(pts)
    masks = active_mask(f, X)
    cond = affine_condition(f, M, X, masks)
    bad = np.flatnonzero(cond <= rank_tol)
    violations = [
        Violation([float(v) for v in X[i]], tuple(int(j) + 1 for j in np.flatnonzero(masks[i])), float(cond[i]))
        for i in bad
    ]
    finite = cond[np.isfinite(cond)]
    return ValidationReport(
        probes=len(X),
        multi_active_probes=int(finite.size),
        worst_condition=float(finite.min()) if finite.size else None,
        violations=violations,
    )


# --------------------------------------------------------------------------
# Closure probes

def closure_probe(f: CSFunction, M: Manifold, x, j: int, h: float = 1e-4, drop: bool = False) -> Optional[Index]:
    """Push x (with j active) toward the side where f_j alone wins, re-project, classify.

    The step follows the tangent components of grad(f_j - f_i), i in J minus j,
    oriented by the selector; ``drop`` reverses it so that j leaves the active
    set instead. Returns None if projection fails.
    """
    x = np.asarray(x, dtype=float)
    J = stratum_of(f, x)
    if j not in J:
        raise ValueError(f"index {j} is not active at the point")
    _, G, _ = f.jets(x[None], order=1)
    P = tangent_projectors(M, x[None])[0]
    d = np.zeros(M.n)
    for i in J:
        if i != j:
            d += P @ (G[0, j - 1] - G[0, i - 1])
    norm = np.linalg.norm(d)
    if norm == 0:
        return None
    y, ok = project_batch(M, (x + (-1 if drop else 1) * f.sign * h * d / norm)[None])
    if not ok[0]:
        return None
    return stratum_of(f, y[0])
