import numpy as np
import pytest
from hypothesis import given, strategies as st

from csmorse.expr import (
    Add, ExprDomainError, ExprSyntaxError, Num, Pow, Var, eval_jet2, evaluate_many,
    finite_difference_check, is_symmetric, parse,
)

from corpus import random_corpus


def test_parse_sum_of_squares_tree():
    e = parse("x1^2+x2^2", 4)
    assert e.root == Add(Pow(Var(1), 2), Pow(Var(2), 2))
    assert repr(e.root) == "Add(Pow(x1,2),Pow(x2,2))"


@pytest.mark.parametrize("src, n, message", [
    ("max(x1,x2)", 2, "unknown identifier max"),
    ("x5", 4, "variable index exceeds dimension"),
    ("x1^2.5", 2, "non-integer exponent literal"),
    ("x1 +", 2, "malformed"),
    ("(x1", 2, "expected ')'"),
    ("foo", 2, "unknown identifier foo"),
])
def test_parse_errors(src, n, message):
    with pytest.raises(ExprSyntaxError) as err:
        parse(src, n)
    assert message in str(err.value)
    assert 0 <= err.value.offset <= len(src.encode())


def test_syntax_error_offset_points_at_token():
    with pytest.raises(ExprSyntaxError) as err:
        parse("x1 + x9", 3)
    assert err.value.offset == 5


@pytest.mark.parametrize("src, x, expected", [
    ("2^3^2", [], 64.0),               # chained powers read left to right
    ("-x1^2", [3.0], -9.0),            # power binds tighter than negation
    ("8/4/2", [], 1.0),                # left associative division
    ("1-2-3", [], -4.0),
    ("2*x1+3*x1^-1", [2.0], 5.5),
    ("(x1+1)^(-2)", [1.0], 0.25),
    ("sqrt(4)*exp(0)+log(1)+sin(0)+cos(0)", [], 3.0),
])
def test_precedence_and_values(src, x, expected):
    n = max(1, len(x))
    xx = np.array(x or [0.0])
    assert eval_jet2(parse(src, n), xx).value == pytest.approx(expected, rel=1e-15)


def test_polynomial_jet():
    j = eval_jet2(parse("x1^2+x2^2", 2), np.array([1.0, 2.0]))
    assert j.value == 5
    np.testing.assert_array_equal(j.gradient, [2, 4])
    np.testing.assert_array_equal(j.hessian, np.diag([2.0, 2.0]))


def test_linear_jet():
    j = eval_jet2(parse("x1", 2), np.array([0.3, 0.7]))
    assert j.value == 0.3
    np.testing.assert_array_equal(j.gradient, [1, 0])
    np.testing.assert_array_equal(j.hessian, np.zeros((2, 2)))


@pytest.mark.parametrize("src, x, needle", [
    ("log(x1)", [0.0], "log(x1)"),
    ("log(x1 - 1)", [0.5], "log"),
    ("sqrt(x1)", [-1.0], "sqrt"),
    ("1/(x1 - x1)", [2.0], "/"),
    ("exp(x1)", [1e4], "exp"),
])
def test_domain_errors_name_subexpression(src, x, needle):
    with pytest.raises(ExprDomainError) as err:
        eval_jet2(parse(src, 1), np.array(x))
    assert needle in err.value.subexpression


def test_batched_matches_pointwise():
    e = parse("sin(x1*x2) + exp(x3)/(2 + cos(x1))", 3)
    X = np.random.default_rng(0).normal(size=(7, 3))
    jb = eval_jet2(e, X)
    for i in range(7):
        jp = eval_jet2(e, X[i])
        assert jb.value[i] == pytest.approx(jp.value, rel=1e-15)
        np.testing.assert_allclose(jb.gradient[i], jp.gradient, rtol=1e-14)
        np.testing.assert_allclose(jb.hessian[i], jp.hessian, rtol=1e-14, atol=1e-15)


def test_evaluate_many_shapes():
    es = [parse("x1", 2), parse("x1*x2", 2), parse("x2^3", 2)]
    v, g, h = evaluate_many(es, np.ones((4, 2)))
    assert v.shape == (4, 3) and g.shape == (4, 3, 2) and h.shape == (4, 3, 2, 2)


def test_twenty_random_expressions_at_ten_points_match_fd():
    rng = np.random.default_rng(11)
    for src in random_corpus(20, n=3, seed=5):
        e = parse(src, 3)
        for x in rng.uniform(-1.5, 1.5, size=(10, 3)):
            r = finite_difference_check(e, x)
            assert r["gradient_error"] <= 1e-6 and r["hessian_error"] <= 1e-6, src


def test_fd_step_clipped_near_log_edge():
    r = finite_difference_check(parse("log(x1)", 1), np.array([5e-6]))
    assert r["step_clipped"]
    assert r["gradient_error"] <= 1e-6 and r["hessian_error"] <= 1e-6


@st.composite
def expr_pair(draw):
    corpus = random_corpus(40, n=3, seed=draw(st.integers(0, 10_000)))
    i, j = draw(st.integers(0, 39)), draw(st.integers(0, 39))
    return corpus[i], corpus[j]


finite = st.floats(-3, 3, allow_nan=False)


@given(expr_pair(), finite, finite, st.lists(st.floats(-1.2, 1.2), min_size=3, max_size=3))
def test_linearity(pair, a, b, x):
    s1, s2 = pair
    x = np.array(x)
    j1, j2 = eval_jet2(parse(s1, 3), x), eval_jet2(parse(s2, 3), x)
    jc = eval_jet2(parse(f"({a!r})*({s1}) + ({b!r})*({s2})", 3), x)
    scale = 1 + abs(a) * (abs(j1.value) + np.abs(j1.hessian).max()) + abs(b) * (abs(j2.value) + np.abs(j2.hessian).max())
    assert abs(jc.value - (a * j1.value + b * j2.value)) <= 1e-12 * scale
    np.testing.assert_allclose(jc.gradient, a * j1.gradient + b * j2.gradient, atol=1e-12 * scale)
    np.testing.assert_allclose(jc.hessian, a * j1.hessian + b * j2.hessian, atol=1e-12 * scale)


@given(st.integers(0, 10_000), st.lists(st.floats(-1.2, 1.2), min_size=3, max_size=3))
def test_hessian_bitwise_symmetric(seed, x):
    for src in random_corpus(5, n=3, seed=seed):
        h = eval_jet2(parse(src, 3), np.array(x)).hessian
        assert is_symmetric(h)
        assert np.array_equal(h, h.T)


def test_num_literal_forms():
    for src, v in [("1e-3", 1e-3), ("2.5", 2.5), (".5", 0.5), ("3.", 3.0)]:
        assert parse(src, 1).root == Num(v)
