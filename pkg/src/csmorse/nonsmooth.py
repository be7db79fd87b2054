"""Clarke criticality, nondegeneracy and handle classification on M.

Everything is intrinsic to M: selection gradients are projected onto T_xM
before taking convex hulls, and the Lagrangian Hessian carries the
constraint curvature terms mu_k * hess(g_k) that an embedded level set needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .csfun import CSFunction, Index, active_set
from .geometry import Manifold, null_space_rows, tangent_projector

CRIT_TOL = 1e-8
RAW_CRIT_TOL = 1e-5
ND2_TOL = 1e-7
ND1_RTOL = 1e-8
BOUNDARY_LAMBDA = 1e-10


class NotCriticalError(ValueError):
    pass


class ND1Error(ValueError):
    pass


class HandleBoundError(RuntimeError):
    """An index bound from the local stratified-handle analysis was violated."""


# --------------------------------------------------------------------------
# Minimum-norm point of a convex hull (Wolfe's algorithm)

@dataclass(frozen=True)
class SimplexWeights:
    indices: Index
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if w.shape != (len(self.indices),):
            raise ValueError("one weight per index")
        if abs(w.sum() - 1.0) > 1e-10 or np.any(w < -1e-12):
            raise ValueError(f"weights {w} are not on the simplex")


@dataclass(frozen=True)
class MinNormResult:
    weights: np.ndarray
    point: np.ndarray
    norm: float
    gap: float  # Frank-Wolfe optimality gap |v|^2 - min_i <v, p_i>


def _affine_minimizer(P: np.ndarray) -> np.ndarray:
    """Coefficients a (sum 1) minimising |a @ P|, least squares when degenerate."""
    k = P.shape[0]
    K = np.zeros((k + 1, k + 1))
    K[:k, :k] = P @ P.T
    K[:k, k] = K[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    a = sol[:k]
    return a / a.sum()


def min_norm_in_hull(vectors, tol: float = 1e-12, max_iter: int = 1000) -> MinNormResult:
    """Point of smallest Euclidean norm in conv(vectors), with its simplex weights."""
    P = np.atleast_2d(np.asarray(vectors, dtype=float))
    if P.size == 0:
        raise ValueError("need at least one vector")
    m = P.shape[0]
    scale = max(1.0, float(np.max(np.sum(P * P, axis=1))))
    start = int(np.argmin(np.sum(P * P, axis=1)))
    S = [start]
    w = np.array([1.0])
    x = P[start].copy()
    for _ in range(max_iter):
        dots = P @ x
        j = int(np.argmin(dots))
        if x @ x - dots[j] <= tol * scale or j in S:
            break
        S.append(j)
        w = np.append(w, 0.0)
        while True:
            a = _affine_minimizer(P[S])
            if np.all(a > tol):
                w = a
                break
            neg = a <= tol
            ratios = w[neg] / np.maximum(w[neg] - a[neg], 1e-300)
            theta = min(1.0, float(ratios.min()))
            w = theta * a + (1.0 - theta) * w
            keep = w > tol
            if not np.any(keep):
                keep[int(np.argmax(w))] = True
            S = [s for s, k in zip(S, keep) if k]
            w = w[keep]
            w = w / w.sum()
            if len(S) == 1:
                w = np.array([1.0])
                break
        x = w @ P[S]
    weights = np.zeros(m)
    weights[S] = np.clip(w, 0.0, None)
    weights /= weights.sum()
    x = weights @ P
    gap = float(x @ x - np.min(P @ x))
    return MinNormResult(weights, x, float(np.linalg.norm(x)), max(gap, 0.0))


# --------------------------------------------------------------------------
# Criticality

@dataclass
class CriticalityVerdict:
    min_norm_value: float
    lam: SimplexWeights
    mu: np.ndarray
    is_critical: bool
    optimality_gap: float = 0.0
    warnings: List[str] = field(default_factory=list)


def constraint_multipliers(M: Manifold, x, combined_gradient: np.ndarray) -> np.ndarray:
    """mu solving sum mu_k grad g_k = -combined_gradient in least squares."""
    if M.c == 0:
        return np.zeros(0)
    Jg = M.jacobian(np.asarray(x, dtype=float)[None])[0]
    return np.linalg.lstsq(Jg.T, -combined_gradient, rcond=None)[0]


def criticality(f: CSFunction, M: Manifold, x, crit_tol: float = CRIT_TOL, J: Optional[Index] = None) -> CriticalityVerdict:
    x = np.asarray(x, dtype=float)
    if J is None:
        J = active_set(f, x).indices
    _, G, _ = f.jets(x[None], order=1)
    GJ = G[0, [j - 1 for j in J]]
    P = tangent_projector(M, x)
    res = min_norm_in_hull(GJ @ P)
    lam = SimplexWeights(tuple(J), res.weights)
    mu = constraint_multipliers(M, x, res.weights @ GJ)
    warnings = []
    if np.any(res.weights < BOUNDARY_LAMBDA) and len(J) > 1:
        warnings.append("boundary multiplier: some lambda_i < 1e-10")
    return CriticalityVerdict(res.norm, lam, mu, res.norm <= crit_tol, res.gap, warnings)


# --------------------------------------------------------------------------
# Nondegeneracy

@dataclass
class ND1Result:
    ok: bool
    ranks: Dict[int, int]  # left-out index -> observed rank
    expected_rank: int


def check_nd1(f: CSFunction, M: Manifold, x, J: Index) -> ND1Result:
    """Leave-one-out linear independence of projected active gradients (with grad g)."""
    x = np.asarray(x, dtype=float)
    _, G, _ = f.jets(x[None], order=1)
    P = tangent_projector(M, x)
    Jg = M.jacobian(x[None])[0] if M.c else np.zeros((0, M.n))
    expected = len(J) - 1 + M.c
    ranks = {}
    for i in J:
        rows = [P @ G[0, j - 1] for j in J if j != i]
        A = np.vstack(rows + [Jg]) if rows or M.c else np.zeros((0, M.n))
        if A.shape[0] == 0:
            ranks[i] = 0
            continue
        s = np.linalg.svd(A, compute_uv=False)
        ranks[i] = int(np.sum(s > ND1_RTOL * max(s[0], 1e-300)))
    return ND1Result(all(r == expected for r in ranks.values()), ranks, expected)


@dataclass
class NondegeneracyReport:
    nd1_ok: bool
    nd2_ok: bool
    quadratic_index: Optional[int]
    restricted_hessian_eigenvalues: List[float]
    hat_tangent_dim: int

    @property
    def nondegenerate(self) -> bool:
        return self.nd1_ok and self.nd2_ok


def hat_tangent_basis(f: CSFunction, M: Manifold, x, J: Index) -> np.ndarray:
    """Orthonormal rows spanning T_xM intersected with the kernels of grad f_j, j in J.

    At a critical point the active gradients are dependent modulo the normal
    space, so the constraint-plus-gradient matrix has rank c + |J| - 1.
    """
    x = np.asarray(x, dtype=float)
    _, G, _ = f.jets(x[None], order=1)
    Jg = M.jacobian(x[None])[0] if M.c else np.zeros((0, M.n))
    A = np.vstack([Jg, G[0, [j - 1 for j in J]]])
    return null_space_rows(A, rank=M.c + len(J) - 1)


def lagrangian_hessian(f: CSFunction, M: Manifold, x, J: Index, lam: np.ndarray, mu: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _, _, H = f.jets(x[None], order=2)
    L = np.einsum("k,kij->ij", lam, H[0, [j - 1 for j in J]])
    if M.c:
        _, _, Hg = M.jets(x[None], order=2)
        L = L + np.einsum("k,kij->ij", mu, Hg[0])
    return 0.5 * (L + L.T)


def quadratic_index(f: CSFunction, M: Manifold, x, verdict: CriticalityVerdict, nd2_tol: float = ND2_TOL) -> NondegeneracyReport:
    """Second-order data of the Lagrangian restricted to the common kernel.

    Raises NotCriticalError / ND1Error when the preconditions fail.
    """
    if not verdict.is_critical:
        raise NotCriticalError(f"point is not critical (min-norm {verdict.min_norm_value:.3e})")
    J = verdict.lam.indices
    nd1 = check_nd1(f, M, x, J)
    if not nd1.ok:
        raise ND1Error(f"ND1 fails: leave-one-out ranks {nd1.ranks}, expected {nd1.expected_rank}")
    return _second_order(f, M, x, J, verdict.lam.weights, verdict.mu, nd2_tol)


def _second_order(f, M, x, J, lam, mu, nd2_tol) -> NondegeneracyReport:
    B = hat_tangent_basis(f, M, x, J)
    L = lagrangian_hessian(f, M, x, J, lam, mu)
    eig = np.linalg.eigvalsh(B @ L @ B.T) if B.shape[0] else np.zeros(0)
    nd2 = bool(np.all(np.abs(eig) > nd2_tol))
    return NondegeneracyReport(
        nd1_ok=True,
        nd2_ok=nd2,
        quadratic_index=int(np.sum(eig < 0)) if nd2 else None,
        restricted_hessian_eigenvalues=[float(e) for e in eig],
        hat_tangent_dim=int(B.shape[0]),
    )


def nondegeneracy(f: CSFunction, M: Manifold, x, J: Index, lam, mu, nd2_tol: float = ND2_TOL) -> NondegeneracyReport:
    """Non-raising variant used by the search: ND1 failure yields a degenerate report."""
    nd1 = check_nd1(f, M, x, J)
    if not nd1.ok:
        return NondegeneracyReport(False, False, None, [], int(M.dim - (len(J) - 1)))
    return _second_order(f, M, x, J, np.asarray(lam, dtype=float), np.asarray(mu, dtype=float), nd2_tol)


# --------------------------------------------------------------------------
# Stratified handles

KINDS = {1: "smooth", 2: "bisected", 3: "trisected"}


@dataclass(frozen=True)
class HandleClass:
    kind: str
    total_index: int
    k_param: int  # |active set| - 1
    m_param: int  # quadratic index


def classify_handle(f: CSFunction, M: Manifold, record) -> HandleClass:
    """Handle type of a nondegenerate critical record (needs ``J`` and ``nondegeneracy``).

    Max selector: the handle index is the quadratic index. Min selector: the
    quadratic index plus |J| - 1.
    """
    J = tuple(record.J)
    nd: NondegeneracyReport = record.nondegeneracy
    if not nd.nondegenerate or nd.quadratic_index is None:
        raise ValueError("handle classes exist only at nondegenerate critical points")
    k = len(J) - 1
    m = nd.quadratic_index
    total = m if f.selector == "max" else m + k
    kind = KINDS.get(len(J), f"{len(J)}-sected")
    if M.dim == 4 and f.selector == "max":
        bound = {2: 3, 3: 2}.get(len(J))
        if bound is not None and total > bound:
            raise HandleBoundError(
                f"{kind} handle at stratum {J} has index {total} > {bound}; "
                "upstream classification is inconsistent"
            )
    return HandleClass(kind, total, k, m)


# --------------------------------------------------------------------------
# Stratum tangent spaces (restriction checks)

def stratum_tangent_basis(f: CSFunction, M: Manifold, x, J: Index) -> np.ndarray:
    """Orthonormal rows spanning T_x M_J: kernel of grad g and grad(f_i - f_j0)."""
    x = np.asarray(x, dtype=float)
    _, G, _ = f.jets(x[None], order=1)
    Jg = M.jacobian(x[None])[0] if M.c else np.zeros((0, M.n))
    sel = [j - 1 for j in J]
    D = G[0, sel[1:]] - G[0, sel[:1]]
    return null_space_rows(np.vstack([Jg, D]), rank=M.c + len(J) - 1)


def restricted_gradient_norms(f: CSFunction, M: Manifold, x, J: Index) -> List[float]:
    B = stratum_tangent_basis(f, M, x, J)
    _, G, _ = f.jets(np.asarray(x, dtype=float)[None], order=1)
    return [float(np.linalg.norm(B @ G[0, j - 1])) for j in J]
