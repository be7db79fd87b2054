import numpy as np
import pytest

from csmorse.csfun import CSFunction, active_set
from csmorse.expr import parse
from csmorse.geometry import sphere
from csmorse.nonsmooth import criticality
from csmorse.search import (
    RawSolutions, SearchConfig, critical_values, detect_degenerate_sets, find_critical_points,
    kkt_residual,
)

from conftest import R2, R3, match_points

S4_MAX3_POINTS = [
    [-R3, -R3, -R3, 0, 0], [R3, R3, R3, 0, 0],
    [R2, R2, 0, 0, 0], [R2, 0, R2, 0, 0], [0, R2, R2, 0, 0],
    [1, 0, 0, 0, 0], [0, 1, 0, 0, 0], [0, 0, 1, 0, 0],
]
S3_LINEAR_POINTS = [[-R2, -R2, 0, 0], [R2, R2, 0, 0], [1, 0, 0, 0], [0, 1, 0, 0]]


def test_kkt_residual_exact_point(problems):
    f, M = problems["s4_max3"]
    # on the unit sphere mu = -f(x)/2 for linear selections, since grad g = 2x
    for x, J, lam in [
        ([-R3, -R3, -R3, 0, 0], (1, 2, 3), [1 / 3] * 3),
        ([R2, R2, 0, 0, 0], (1, 2), [0.5, 0.5]),
        ([1, 0, 0, 0, 0], (1,), [1.0]),
    ]:
        x = np.array(x)
        mu = [-np.dot(lam, x[[j - 1 for j in J]]) / 2]
        r = kkt_residual(f, M, J, x, lam, mu)
        assert r.shape == (5 + len(J) - 1 + 1 + 1,)
        assert np.max(np.abs(r)) <= 1e-12


def test_kkt_residual_perturbation_and_sum(problems):
    f, M = problems["s4_max3"]
    x = np.array([R2, R2, 0, 0, 0])
    r = kkt_residual(f, M, (1, 2), x + 1e-3 * np.array([1, -2, 1, 1, 0]), [0.5, 0.5], [-R2 / 2])
    assert 1e-4 <= np.linalg.norm(r) <= 1e-1
    r0 = kkt_residual(f, M, (1, 2), x, [0.0, 0.0], [0.0])
    assert r0[-1] == -1.0


def test_s4_max3_records(searches):
    res = searches["s4_max3"]
    assert match_points([r.x for r in res.records], S4_MAX3_POINTS, 1e-8)
    assert not res.degenerate_sets and res.cs_morse


def test_s3_linear_records(searches):
    res = searches["s3_linear"]
    assert match_points([r.x for r in res.records], S3_LINEAR_POINTS, 1e-8)


def test_critical_values(searches):
    assert np.allclose(critical_values(searches["s4_max3"].records), [-R3, R3, R2, 1.0], atol=1e-10)
    assert np.allclose(critical_values(searches["s3_linear"].records), [-R2, R2, 1.0], atol=1e-10)
    assert critical_values([]) == []


def test_s3_quadratic_flags(searches):
    res = searches["s3_quadratic"]
    assert not res.cs_morse
    assert not [r for r in res.records if abs(r.value - 0.5) < 1e-6]
    torus = [d for d in res.degenerate_sets if d.J == (1, 2)]
    assert len(torus) == 1
    assert torus[0].value == pytest.approx(0.5, abs=1e-9)
    assert torus[0].diameter > 0.5


@pytest.mark.parametrize("name", ["s4_max3", "s4_min3", "s3_linear", "s2_bridge"])
def test_records_reverify(problems, searches, name):
    f, M = problems[name]
    for r in searches[name].records:
        assert r.residual <= 1e-9
        assert active_set(f, r.x).indices == r.J
        assert M.is_on(r.x)[0]
        assert criticality(f, M, r.x).min_norm_value <= 1e-8
        assert r.lam.weights.min() >= 0


def test_permutation_equivariance(searches):
    pts = [r.x for r in searches["s4_max3"].records]
    for perm in ([1, 0, 2, 3, 4], [2, 0, 1, 3, 4]):
        assert match_points([p[perm] for p in pts], pts, 1e-8)


@pytest.mark.parametrize("name", ["s4_max3", "s3_linear", "s2_bridge"])
def test_doubling_starts_stable(scenarios, problems, searches, name):
    f, M = problems[name]
    cfg = SearchConfig(**{**scenarios[name].search.__dict__, "starts_per_subset": 400})
    big = find_critical_points(f, M, cfg)
    assert match_points([r.x for r in big.records], [r.x for r in searches[name].records], 1e-8)


def test_deterministic_and_parallel_identical(scenarios, problems, searches):
    f, M = problems["s3_linear"]
    cfg = scenarios["s3_linear"].search
    a = find_critical_points(f, M, cfg)
    b = find_critical_points(f, M, SearchConfig(**{**cfg.__dict__, "jobs": 3}))
    for r, s in zip(a.records, b.records):
        assert np.array_equal(r.x, s.x) and r.J == s.J
    assert a.diagnostics == b.diagnostics


def test_diagnostics_account_for_every_start(searches):
    for name, res in searches.items():
        for d in res.diagnostics.values():
            assert d["converged"] + d["not_converged"] == d["starts"]
            assert d["accepted"] + d["active_set_mismatch"] + d["negative_multiplier"] == d["converged"]


def test_synthetic_degenerate_fixture_flagged():
    # max{x1, x1 + x3^2} on S^3: at +-e1 the multipliers form a segment
    f = CSFunction([parse("x1", 4), parse("x1 + x3^2", 4)])
    M = sphere(4)
    res = find_critical_points(f, M, SearchConfig(seed=3, starts_per_subset=100))
    flags = [d for d in res.degenerate_sets if d.J == (1, 2)]
    assert flags
    for d in flags:
        for x in d.representatives:
            assert criticality(f, M, x, J=(1, 2)).min_norm_value <= 1e-6


def test_detect_degenerate_sets_direct():
    cfg = SearchConfig()
    t = np.linspace(0, 2 * np.pi, 50, endpoint=False)
    X = np.stack([np.cos(t), np.sin(t), 0 * t], axis=1)
    raw = RawSolutions((1, 2), X, np.full((50, 2), 0.5), np.zeros((50, 1)), np.zeros(50),
                       np.full(50, 1e-12), np.ones(50, dtype=bool))
    flags, tight = detect_degenerate_sets(raw, cfg)
    assert len(flags) == 1 and not tight
    assert flags[0].members == 50 and flags[0].diameter == pytest.approx(2.0, abs=1e-2)
    raw.X = np.tile([1.0, 0, 0], (50, 1)) + 1e-9 * X
    flags, tight = detect_degenerate_sets(raw, cfg)
    assert not flags and len(tight) == 1


def test_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(starts_per_subset=0)
    with pytest.raises(ValueError):
        SearchConfig(dedupe_radius=-1)
    with pytest.raises(ValueError):
        SearchConfig(backtrack_factor=1.5)
