"""Constraint-defined manifolds M = {x : g_1(x) = ... = g_c(x) = 0} in R^n."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from .expr import Expression, evaluate_many
from .rng import stream

RANK_TOL = 1e-10


class GeometryError(RuntimeError):
    pass


class ProjectionError(GeometryError):
    pass


class RankDeficiencyError(GeometryError):
    pass


@dataclass(frozen=True)
class Manifold:
    n: int
    constraints: Tuple[Expression, ...]
    bbox: np.ndarray = field(repr=False)  # (n, 2) lower/upper per coordinate
    on_manifold_tol: float = 1e-10
    name: str = ""

    def __post_init__(self):
        box = np.asarray(self.bbox, dtype=float)
        if box.shape != (self.n, 2) or np.any(box[:, 0] >= box[:, 1]):
            raise ValueError("bounding box must be an (n, 2) array of increasing intervals")
        object.__setattr__(self, "bbox", box)
        object.__setattr__(self, "constraints", tuple(self.constraints))
        for g in self.constraints:
            if g.n != self.n:
                raise ValueError(f"constraint '{g}' is over R^{g.n}, manifold ambient is R^{self.n}")
        if len(self.constraints) >= self.n:
            raise ValueError("need fewer constraints than ambient dimensions")

    @property
    def c(self) -> int:
        return len(self.constraints)

    @property
    def dim(self) -> int:
        return self.n - self.c

    def jets(self, X, order: int = 2):
        """Constraint values (B, c), gradients (B, c, n), Hessians (B, c, n, n)."""
        return evaluate_many(self.constraints, X, order=order)

    def residual(self, X) -> np.ndarray:
        return self.jets(X, order=0)[0]

    def jacobian(self, X) -> np.ndarray:
        return self.jets(X, order=1)[1]

    def is_on(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.c == 0:
            return np.ones(len(X), dtype=bool)
        return np.max(np.abs(self.residual(X)), axis=1) <= self.on_manifold_tol


def sphere(n: int, radius: float = 1.0, name: str = "") -> Manifold:
    """The round (n-1)-sphere in R^n, with a box slightly larger than the ball."""
    from .expr import parse

    src = "+".join(f"x{i}^2" for i in range(1, n + 1)) + f"-{radius**2!r}"
    r = 1.1 * radius
    return Manifold(n, (parse(src, n),), np.tile([-r, r], (n, 1)), name=name or f"S{n - 1}")


# --------------------------------------------------------------------------
# Batched Gauss-Newton

def _pinv_steps(J: np.ndarray, R: np.ndarray, rank_tol: float):
    """Minimum-norm steps -J^+ R and a full-row-rank mask, batched."""
    U, s, Vt = np.linalg.svd(J, full_matrices=False)
    smax = s[:, :1] if s.shape[1] else np.zeros((len(J), 1))
    keep = s > rank_tol * np.maximum(smax, 1e-300)
    full_rank = np.all(keep, axis=1) & (smax[:, 0] > 0)
    inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    coeff = inv * np.einsum("bpk,bp->bk", U, R)
    step = -np.einsum("bkn,bk->bn", Vt, coeff)
    return step, full_rank


def gauss_newton(
    system: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]],
    X0: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 50,
    rank_tol: float = RANK_TOL,
):
    """Solve the underdetermined system r(x) = 0 from each row of X0.

    ``system(X)`` returns residuals (B, p) and Jacobians (B, p, n). Steps are
    minimum-norm, so iterates move along the row space of the Jacobian.
    Returns (X, converged, rank_ok); a point whose Jacobian loses rank on the
    Newton path is frozen and reported with rank_ok False.
    """
    X = np.array(X0, dtype=float, copy=True)
    B = len(X)
    converged = np.zeros(B, dtype=bool)
    rank_ok = np.ones(B, dtype=bool)
    active = np.ones(B, dtype=bool)
    for _ in range(max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        R, J = system(X[idx])
        done = np.max(np.abs(R), axis=1) <= tol if R.shape[1] else np.ones(idx.size, bool)
        converged[idx[done]] = True
        active[idx[done]] = False
        todo = ~done
        if not np.any(todo):
            break
        step, fr = _pinv_steps(J[todo], R[todo], rank_tol)
        bad = idx[todo][~fr]
        rank_ok[bad] = False
        active[bad] = False
        good = idx[todo][fr]
        X[good] += step[fr]
        blown = ~np.all(np.isfinite(X[good]), axis=1) | (np.max(np.abs(X[good]), axis=1) > 1e8)
        active[good[blown]] = False
    return X, converged, rank_ok


def _manifold_system(M: Manifold):
    def system(X):
        v, g, _ = M.jets(X, order=1)
        return v, g

    return system


def project_batch(M: Manifold, X0, max_iter: int = 50):
    """Project rows of X0 onto M. Returns (X, ok) where ok marks success."""
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    if M.c == 0:
        return X0.copy(), np.ones(len(X0), dtype=bool)
    from .expr import ExprDomainError

    try:
        X, conv, rank_ok = gauss_newton(_manifold_system(M), X0, M.on_manifold_tol, max_iter)
    except ExprDomainError:
        # fall back to one point at a time so a single bad start only loses itself
        X = X0.copy()
        ok = np.zeros(len(X0), dtype=bool)
        for i in range(len(X0)):
            try:
                X[i : i + 1], ok[i : i + 1] = project_batch(M, X0[i : i + 1], max_iter)
            except ExprDomainError:
                pass
        return X, ok
    return X, conv & rank_ok


def _within_double_box(M: Manifold, x: np.ndarray) -> bool:
    lo, hi = M.bbox[:, 0], M.bbox[:, 1]
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return bool(np.all(np.abs(x - mid) <= 2.0 * half))


def project_to_manifold(M: Manifold, x0, max_iter: int = 50) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("start point must be finite")
    if not _within_double_box(M, x0):
        raise ValueError("start point lies outside twice the bounding box")
    if M.c == 0:
        return x0.copy()
    X, conv, rank_ok = gauss_newton(_manifold_system(M), x0[None], M.on_manifold_tol, max_iter)
    if not rank_ok[0]:
        raise RankDeficiencyError(
            "constraint Jacobian is rank deficient on the Newton path: "
            + _constraint_names(M, M.jacobian(X)[0])
        )
    if not conv[0]:
        raise ProjectionError(f"Gauss-Newton did not converge in {max_iter} iterations")
    return X[0]


def _constraint_names(M: Manifold, J: np.ndarray) -> str:
    U, s, _ = np.linalg.svd(J)
    u = U[:, -1]
    names = [str(g) for g, w in zip(M.constraints, u) if abs(w) > 1e-3]
    return "{" + ", ".join(names or [str(g) for g in M.constraints]) + "}"


# --------------------------------------------------------------------------
# Tangent spaces

@dataclass(frozen=True)
class TangentBasis:
    point: np.ndarray
    basis: np.ndarray  # (n - c, n), orthonormal rows

    @property
    def projector(self) -> np.ndarray:
        return self.basis.T @ self.basis


def null_space_rows(A: np.ndarray, rank: Optional[int] = None, rtol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal rows spanning the null space of A (p x n), via SVD."""
    A = np.atleast_2d(A)
    n = A.shape[1]
    if A.shape[0] == 0:
        return np.eye(n)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    if rank is None:
        rank = int(np.sum(s > rtol * max(s[0], 1e-300))) if s.size else 0
    return Vt[rank:].copy()


def tangent_basis(M: Manifold, x) -> TangentBasis:
    x = np.asarray(x, dtype=float)
    if M.c == 0:
        return TangentBasis(x.copy(), np.eye(M.n))
    J = M.jacobian(x[None])[0]
    s = np.linalg.svd(J, compute_uv=False)
    if s[-1] <= RANK_TOL * max(s[0], 1e-300):
        raise RankDeficiencyError(
            "constraint Jacobian is rank deficient at the point: " + _constraint_names(M, J)
        )
    return TangentBasis(x.copy(), null_space_rows(J, rank=M.c))


def tangent_projector(M: Manifold, x) -> np.ndarray:
    return tangent_basis(M, x).projector


def tangent_projectors(M: Manifold, X: np.ndarray) -> np.ndarray:
    """Orthogonal projectors onto T_xM for a batch (B, n, n)."""
    X = np.atleast_2d(X)
    if M.c == 0:
        return np.broadcast_to(np.eye(M.n), (len(X), M.n, M.n)).copy()
    J = M.jacobian(X)
    Q, _ = np.linalg.qr(np.swapaxes(J, 1, 2))  # (B, n, c) orthonormal normal frame
    return np.eye(M.n)[None] - Q @ np.swapaxes(Q, 1, 2)


# --------------------------------------------------------------------------
# Sampling

def sample_points(M: Manifold, count: int, seed: int, stream_name: str = "sample") -> np.ndarray:
    """Uniform draws in the bounding box projected onto M, in draw order.

    Not exactly uniform on M. Deterministic for a given (seed, stream_name).
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return np.zeros((0, M.n))
    rng = stream(seed, stream_name)
    lo, hi = M.bbox[:, 0], M.bbox[:, 1]
    batch = max(64, count)
    out = []
    got = drawn = 0
    while got < count:
        if drawn >= 100 * count:
            raise GeometryError(
                f"only {got} of {count} points projected successfully after {drawn} draws"
            )
        X0 = lo + (hi - lo) * rng.random((batch, M.n))
        drawn += batch
        X, ok = project_batch(M, X0)
        ok &= M.is_on(X)
        out.append(X[ok])
        got += int(ok.sum())
    return np.concatenate(out)[:count]


def sample_points_sharded(M: Manifold, count: int, seed: int, shards: int) -> list:
    """Split ``count`` across ``shards`` independent streams; merge order is shard order."""
    sizes = [count // shards + (1 if i < count % shards else 0) for i in range(shards)]
    return [sample_points(M, k, seed, stream_name=f"sample-shard-{i}") for i, k in enumerate(sizes)]


__all__ = [
    "GeometryError", "Manifold", "ProjectionError", "RankDeficiencyError",
    "TangentBasis", "gauss_newton", "null_space_rows", "project_batch",
    "project_to_manifold", "sample_points", "sample_points_sharded", "sphere",
    "tangent_basis", "tangent_projector", "tangent_projectors",
]
