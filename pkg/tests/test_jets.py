import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ordcut.jets import (
    JetPolynomial,
    TaylorSeries,
    from_json,
    jet_of,
    mi_factorial,
    multi_indices,
    poly_derivative_at,
    poly_eval,
    recenter,
    to_json,
)


def test_constant_polynomial():
    P = JetPolynomial((0.0, 0.0), 2, {(0, 0): 4.95})
    for x in [(0, 0), (3.0, -1.0), (100.0, 7.0)]:
        assert poly_eval(P, x) == 4.95


def test_one_dimensional_value():
    P = JetPolynomial((0.0,), 2, {(0,): 1.0, (1,): 1.0, (2,): 2.0})
    assert poly_eval(P, (0.5,)) == 1.75


def test_two_dimensional_value():
    assert poly_eval(JetPolynomial((0.0, 0.0), 2, {(2, 0): 2.0}), (1.0, 1.0)) == 1.0


def test_derivative_of_square():
    P = JetPolynomial((0.0,), 2, {(2,): 2.0})
    assert poly_derivative_at(P, (1,), (3.0,)) == 6.0


def test_laplacian_of_paraboloid_is_constant():
    P = JetPolynomial((0.0, 0.0), 2, {(2, 0): 2.0, (0, 2): 2.0})
    for x in [(0.0, 0.0), (1.0, -2.0), (0.3, 0.7)]:
        assert poly_derivative_at(P, (2, 0), x) + poly_derivative_at(P, (0, 2), x) == 4.0


def test_jet_of_paraboloid():
    P = JetPolynomial((0.0, 0.0), 2, {(2, 0): 2.0, (0, 2): 2.0})
    jet = jet_of(P, (1.0, 0.0))
    assert jet == {(0, 0): 1.0, (0, 1): 0.0, (1, 0): 2.0, (0, 2): 2.0, (1, 1): 0.0, (2, 0): 2.0}


def test_jet_size():
    assert len(jet_of(JetPolynomial((0.0, 0.0), 2, {}), (0.5, 0.5))) == 6 == math.comb(4, 2)


def test_multi_index_order():
    assert multi_indices(2, 2) == ((0, 0), (0, 1), (1, 0), (0, 2), (1, 1), (2, 0))


def test_rejects_out_of_order_index():
    with pytest.raises(ValueError):
        JetPolynomial((0.0,), 1, {(2,): 1.0})
    with pytest.raises(ValueError):
        JetPolynomial((0.0, 0.0), 2, {(1,): 1.0})


def test_vectorised_points():
    P = JetPolynomial((0.5,), 3, {(0,): 1.0, (1,): -2.0, (3,): 6.0})
    xs = np.linspace(-1, 1, 9)[:, None]
    vec = poly_eval(P, xs)
    assert vec.shape == (9,)
    assert np.array_equal(vec, [poly_eval(P, x) for x in xs])


def test_json_round_trip():
    P = JetPolynomial((0.25, -1.0), 3, {(0, 0): 1.5, (2, 1): -0.75, (0, 3): 2.0})
    data = to_json(P)
    assert data["coeffs"][0] == {"p": [0, 0], "a": 1.5}
    assert from_json(data) == P


def test_recenter_preserves_values():
    P = JetPolynomial((0.0, 0.0), 3, {(0, 0): 1.0, (1, 2): 3.0, (3, 0): -2.0, (1, 0): 0.5})
    Q = recenter(P, (0.4, -0.3))
    pts = np.random.default_rng(0).uniform(-1, 1, (20, 2))
    assert np.allclose(poly_eval(P, pts), poly_eval(Q, pts), rtol=0, atol=1e-12)


def test_taylor_series_of_product():
    # (1 + x)(1 + x) = 1 + 2x + x^2 about 0
    x = TaylorSeries.variable(0, 0.0, 1, 3)
    s = (x + 1.0) * (x + 1.0)
    assert [s.coeff((k,)) for k in range(4)] == [1.0, 2.0, 1.0, 0.0]


def test_taylor_series_of_exp():
    x = TaylorSeries.variable(0, 0.0, 1, 5)
    s = x.func("exp")
    assert [s.coeff((k,)) for k in range(6)] == pytest.approx([1 / math.factorial(k) for k in range(6)], abs=1e-15)


# -- properties ---------------------------------------------------------------


@st.composite
def polynomials(draw, coeff=st.floats(-10, 10, allow_nan=False), max_n=3, max_m=4):
    n = draw(st.integers(1, max_n))
    m = draw(st.integers(0, max_m))
    center = tuple(draw(st.floats(-1, 1)) for _ in range(n))
    coeffs = {p: draw(coeff) for p in multi_indices(n, m)}
    return JetPolynomial(center, m, coeffs)


@settings(max_examples=200, deadline=None)
@given(polynomials())
def test_taylor_identity(P):
    jet = jet_of(P, P.center)
    assert jet == {p: P.coeff(p) for p in multi_indices(P.dimension, P.order)}


@settings(max_examples=200, deadline=None)
@given(polynomials(max_m=5), st.data())
def test_derivatives_match_central_differences(P, data):
    n = P.dimension
    x = np.array([data.draw(st.floats(-1, 1)) for _ in range(n)])
    h = 1e-5
    for p in multi_indices(n, max(P.order - 1, 0)):
        for i in range(n):
            step = np.zeros(n)
            step[i] = h
            fd = (poly_derivative_at(P, p, x + step) - poly_derivative_at(P, p, x - step)) / (2 * h)
            q = tuple(k + (j == i) for j, k in enumerate(p))
            exact = poly_derivative_at(P, q, x)
            assert abs(fd - exact) <= 1e-6 * max(1.0, abs(exact))


def _combine(P, Q, a, b):
    keys = set(P.coeffs) | set(Q.coeffs)
    return JetPolynomial(P.center, P.order, {p: a * P.coeff(p) + b * Q.coeff(p) for p in keys})


@st.composite
def integer_pairs(draw):
    # integer offsets that are multiples of 6 keep x^e / e! integral up to e = 4,
    # so every intermediate is an exactly representable integer
    n = draw(st.integers(1, 3))
    m = draw(st.integers(0, 4))
    ints = st.integers(-10, 10).map(float)
    P = JetPolynomial((0.0,) * n, m, {p: draw(ints) for p in multi_indices(n, m)})
    Q = JetPolynomial((0.0,) * n, m, {p: draw(ints) for p in multi_indices(n, m)})
    x = tuple(float(draw(st.sampled_from([-12, -6, 0, 6, 12]))) for _ in range(n))
    return P, Q, x


@settings(max_examples=200, deadline=None)
@given(integer_pairs(), st.integers(-5, 5), st.integers(-5, 5))
def test_linearity_exact(pair, a, b):
    P, Q, x = pair
    R = _combine(P, Q, float(a), float(b))
    for p in multi_indices(P.dimension, P.order):
        assert poly_derivative_at(R, p, x) == a * poly_derivative_at(P, p, x) + b * poly_derivative_at(Q, p, x)


@settings(max_examples=200, deadline=None)
@given(polynomials(), st.floats(-3, 3), st.floats(-3, 3), st.data())
def test_linearity_floating(P, a, b, data):
    Q = JetPolynomial(P.center, P.order, {p: data.draw(st.floats(-10, 10)) for p in P.coeffs})
    x = tuple(data.draw(st.floats(-1, 1)) for _ in range(P.dimension))
    R = _combine(P, Q, a, b)
    for p in multi_indices(P.dimension, P.order):
        lhs = poly_derivative_at(R, p, x)
        rhs = a * poly_derivative_at(P, p, x) + b * poly_derivative_at(Q, p, x)
        scale = sum(abs(v) for v in P.coeffs.values()) + sum(abs(v) for v in Q.coeffs.values())
        assert abs(lhs - rhs) <= 1e-13 * (1 + 10 * scale)


def test_factorial_of_multi_index():
    assert mi_factorial((3, 0, 2)) == 12
