import numpy as np
import pytest
from hypothesis import given, strategies as st

from csmorse.csfun import CSFunction
from csmorse.expr import parse
from csmorse.geometry import project_to_manifold, sphere
from csmorse.nonsmooth import (
    HandleBoundError, ND1Error, NotCriticalError, SimplexWeights, check_nd1,
    classify_handle, criticality, hat_tangent_basis, min_norm_in_hull, nondegeneracy,
    quadratic_index, restricted_gradient_norms,
)

from oracles import brute_min_norm, restricted_fd_index

R2, R3 = 1 / np.sqrt(2), 1 / np.sqrt(3)


def lin(n, k, selector="max"):
    return CSFunction([parse(f"x{i}", n) for i in range(1, k + 1)], selector)


def test_min_norm_singleton():
    r = min_norm_in_hull([[1.0, 0.0]])
    np.testing.assert_allclose(r.weights, [1.0])
    assert r.norm == pytest.approx(1.0)


def test_min_norm_symmetric_pair():
    r = min_norm_in_hull([[1.0, 0.0], [-1.0, 0.0]])
    np.testing.assert_allclose(r.weights, [0.5, 0.5], atol=1e-12)
    assert r.norm <= 1e-12


def test_min_norm_orthogonal_pair():
    r = min_norm_in_hull([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(r.weights, [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(r.point, [0.5, 0.5], atol=1e-12)
    assert r.norm == pytest.approx(R2, abs=1e-12)
    # grid oracle at step 1e-4
    norm, lam = brute_min_norm([[1.0, 0.0], [0.0, 1.0]], step=1e-4)
    assert abs(norm - r.norm) <= 1e-8 and np.allclose(lam, [0.5, 0.5])


@given(st.integers(2, 3), st.integers(2, 5), st.integers(0, 2**31))
def test_min_norm_against_grid(k, dim, seed):
    # vectors in a ball of radius 1/2 keep the grid's own error (step x hull diameter) below 1e-3
    rng = np.random.default_rng(seed)
    V = rng.normal(size=(k, dim))
    V *= 0.5 * rng.uniform(size=(k, 1)) ** (1 / dim) / np.linalg.norm(V, axis=1, keepdims=True)
    r = min_norm_in_hull(V)
    norm, _ = brute_min_norm(V, step=1e-3)
    assert abs(r.norm - norm) <= 1e-3
    assert r.norm <= norm + 1e-12
    assert np.all(r.weights >= -1e-12) and abs(r.weights.sum() - 1) <= 1e-10
    if r.norm <= 1e-9:
        assert norm <= 1e-2
    if norm <= 1e-2:
        assert r.norm <= 1e-2


@given(st.integers(0, 2**31), st.floats(0.1, 10))
def test_criticality_scaling_invariance(seed, c):
    rng = np.random.default_rng(seed)
    M = sphere(5)
    x = project_to_manifold(M, rng.normal(size=5) * 0.5 + 0.01)
    f1 = CSFunction([parse("x1", 5), parse("x2", 5), parse("x3", 5)])
    fc = CSFunction([parse(f"{c!r}*x{i}", 5) for i in (1, 2, 3)])
    for J in [(1, 2, 3), (1, 2)]:
        a, b = criticality(f1, M, x, J=J), criticality(fc, M, x, J=J)
        assert a.is_critical == b.is_critical
        np.testing.assert_allclose(a.lam.weights, b.lam.weights, atol=1e-8)
        assert b.min_norm_value == pytest.approx(c * a.min_norm_value, rel=1e-8, abs=1e-12)


@pytest.mark.parametrize("x, lam", [
    ([-R3, -R3, -R3, 0, 0], [1 / 3, 1 / 3, 1 / 3]),
    ([1, 0, 0, 0, 0], [1.0]),
])
def test_criticality_at_paper_points(x, lam):
    v = criticality(lin(5, 3), sphere(5), np.array(x, float))
    assert v.is_critical
    np.testing.assert_allclose(v.lam.weights, lam, atol=1e-10)


def test_generic_point_not_critical():
    M = sphere(5)
    x = project_to_manifold(M, np.array([0.9, 0.1, 0.1, 0.2, 0.2]))
    v = criticality(lin(5, 3), M, x)
    assert not v.is_critical and v.min_norm_value > 0.01


def test_min_norm_field_recomputable():
    M, f = sphere(5), lin(5, 3)
    x = project_to_manifold(M, np.array([0.5, 0.5, 0.5, 0.3, 0.1]))
    v = criticality(f, M, x, J=(1, 2, 3))
    P = np.eye(5) - np.outer(x, x)
    G = np.eye(5)[:3]
    assert np.linalg.norm(v.lam.weights @ (G @ P)) == pytest.approx(v.min_norm_value, abs=1e-9)


def test_simplex_weights_validated():
    with pytest.raises(ValueError):
        SimplexWeights((1, 2), np.array([0.7, 0.7]))
    with pytest.raises(ValueError):
        SimplexWeights((1,), np.array([0.5, 0.5]))


def test_nd1_examples():
    M = sphere(5)
    x = np.array([R3, R3, R3, 0, 0])
    assert check_nd1(lin(5, 3), M, x, (1, 2, 3)).ok
    dup = CSFunction([parse("x1", 3), parse("x1", 3)])
    # ND1 is a condition at critical points; e1 is critical for the duplicate pair
    assert not check_nd1(dup, sphere(3), np.array([1.0, 0, 0]), (1, 2)).ok
    assert check_nd1(lin(5, 3), M, np.array([1.0, 0, 0, 0, 0]), (1,)).ok


@pytest.mark.parametrize("x, dim, index", [
    ([-R3, -R3, -R3, 0, 0], 2, 0),
    ([R3, R3, R3, 0, 0], 2, 2),
    ([R2, R2, 0, 0, 0], 3, 3),
    ([1, 0, 0, 0, 0], 4, 4),
])
def test_quadratic_index_s4_max3(x, dim, index):
    M, f = sphere(5), lin(5, 3)
    x = np.array(x, float)
    rep = quadratic_index(f, M, x, criticality(f, M, x))
    assert rep.nd1_ok and rep.nd2_ok
    assert rep.hat_tangent_dim == dim and rep.quadratic_index == index
    assert rep.quadratic_index <= rep.hat_tangent_dim


def test_quadratic_index_refuses_noncritical():
    M, f = sphere(5), lin(5, 3)
    x = project_to_manifold(M, np.array([0.9, 0.1, 0.1, 0.2, 0.2]))
    with pytest.raises(NotCriticalError):
        quadratic_index(f, M, x, criticality(f, M, x))


def test_quadratic_index_refuses_nd1_failure():
    f = CSFunction([parse("x1", 3), parse("x1", 3)])
    M = sphere(3)
    x = np.array([1.0, 0, 0])
    with pytest.raises(ND1Error):
        quadratic_index(f, M, x, criticality(f, M, x))


def test_torus_points_fail_nd2():
    f = CSFunction([parse("x1^2 + x2^2", 4), parse("x3^2 + x4^2", 4)])
    M = sphere(4)
    rng = np.random.default_rng(3)
    for a, b in rng.uniform(0, 2 * np.pi, size=(10, 2)):
        x = np.array([np.cos(a), np.sin(a), np.cos(b), np.sin(b)]) * R2
        v = criticality(f, M, x)
        assert v.is_critical
        rep = nondegeneracy(f, M, x, (1, 2), v.lam.weights, v.mu)
        assert rep.nd1_ok and not rep.nd2_ok and rep.quadratic_index is None


class Rec:
    def __init__(self, f, M, x, J):
        v = criticality(f, M, x, J=J)
        self.J = J
        self.nondegeneracy = nondegeneracy(f, M, x, J, v.lam.weights, v.mu)


@pytest.mark.parametrize("x, J, kind, total", [
    ([-R3, -R3, -R3, 0, 0], (1, 2, 3), "trisected", 0),
    ([R3, R3, R3, 0, 0], (1, 2, 3), "trisected", 2),
    ([R2, R2, 0, 0, 0], (1, 2), "bisected", 3),
    ([1, 0, 0, 0, 0], (1,), "smooth", 4),
])
def test_classify_handle_max(x, J, kind, total):
    f, M = lin(5, 3), sphere(5)
    h = classify_handle(f, M, Rec(f, M, np.array(x, float), J))
    assert (h.kind, h.total_index, h.k_param) == (kind, total, len(J) - 1)
    assert h.total_index == h.m_param


def test_classify_handle_min_selector():
    f, M = lin(5, 3, "min"), sphere(5)
    h = classify_handle(f, M, Rec(f, M, np.array([-R3, -R3, -R3, 0, 0]), (1, 2, 3)))
    assert (h.m_param, h.k_param, h.total_index) == (0, 2, 2)
    h = classify_handle(f, M, Rec(f, M, np.array([R3, R3, R3, 0, 0]), (1, 2, 3)))
    assert (h.m_param, h.k_param, h.total_index) == (2, 2, 4)


def test_handle_bound_violation_raises():
    f, M = lin(5, 3), sphere(5)

    class Fake:
        J = (1, 2)
        nondegeneracy = Rec(f, M, np.array([R2, R2, 0, 0, 0]), (1, 2)).nondegeneracy

    Fake.nondegeneracy.quadratic_index = 4
    with pytest.raises(HandleBoundError):
        classify_handle(f, M, Fake)


@pytest.mark.parametrize("x, J", [
    ([-R3, -R3, -R3, 0, 0], (1, 2, 3)),
    ([R3, R3, R3, 0, 0], (1, 2, 3)),
    ([R2, R2, 0, 0, 0], (1, 2)),
    ([0, R2, R2, 0, 0], (2, 3)),
    ([1, 0, 0, 0, 0], (1,)),
])
def test_restriction_consistency_and_fd_index(x, J):
    f, M = lin(5, 3), sphere(5)
    x = np.array(x, float)
    assert max(restricted_gradient_norms(f, M, x, J)) <= 1e-7
    v = criticality(f, M, x, J=J)
    rep = nondegeneracy(f, M, x, J, v.lam.weights, v.mu)
    B = hat_tangent_basis(f, M, x, J)
    fd_index, _ = restricted_fd_index(f, M, x, J, B)
    assert fd_index == rep.quadratic_index


def test_fd_index_on_curved_selection():
    # f = max{x1 + x2^2, x3} on S^2 has a critical point at e1 in M_{1}
    f = CSFunction([parse("x1 + x2^2", 3), parse("x3", 3)])
    M = sphere(3)
    x = np.array([1.0, 0, 0])
    v = criticality(f, M, x)
    rep = nondegeneracy(f, M, x, (1,), v.lam.weights, v.mu)
    fd_index, _ = restricted_fd_index(f, M, x, (1,), hat_tangent_basis(f, M, x, (1,)))
    assert rep.quadratic_index == fd_index == 1
