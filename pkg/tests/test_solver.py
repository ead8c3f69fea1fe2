import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ordcut.bench import get_case, shock_locus
from ordcut.expr import parse, parse_expression
from ordcut.fnspaces import Grid, PiecewiseFn, apply_operator
from ordcut.jets import poly_eval
from ordcut.solver import (
    Field,
    NoBracket,
    RadiusUnderflow,
    SolverConfig,
    audit_patch,
    band_audit,
    build_cover,
    global_approx,
    local_patch,
    local_subsolution,
    local_supersolution,
    refine_cut,
    truncation_allowance,
    viscous_guide,
)

from instances import random_instance

IDENTITY = parse("u = 5", ("x", "y"))
CUBE = parse("u^3 = 2", ("x",))
LAPLACE = parse("dxx(u) + dyy(u) = f")
RICCATI = parse("dt(u) = u^2")
BOX = ((0.0, 1.0), (0.0, 1.0))


@pytest.mark.parametrize("make, value", [(local_subsolution, 4.95), (local_supersolution, 5.05)])
def test_identity_patch(make, value):
    P = make(IDENTITY, 5.0, (0.5, 0.5), 0.1, bounds=BOX)
    assert P.poly.coeff((0, 0)) == pytest.approx(value, abs=1e-12)
    assert P.defect_stats == pytest.approx((value - 5.0, value - 5.0), abs=1e-12)
    assert P.radius == pytest.approx(math.hypot(1, 1))


@pytest.mark.parametrize("make, target", [(local_subsolution, 1.9), (local_supersolution, 2.1)])
def test_cube_root(make, target):
    P = make(CUBE, 2.0, (0.5,), 0.2, bounds=((0.0, 1.0),))
    assert abs(P.poly.coeff((0,)) - target ** (1 / 3)) <= 1e-10
    assert P.defect_stats == pytest.approx((target - 2.0,) * 2, abs=1e-9)


@pytest.mark.parametrize("make, sign", [(local_subsolution, -1), (local_supersolution, 1)])
def test_laplacian_constant_rhs(make, sign):
    c, eps = 3.0, 0.2
    P = make(LAPLACE, c, (0.5, 0.5), eps, bounds=BOX)
    assert P.solved_for == (2, 0)
    assert P.poly.coeff((2, 0)) == pytest.approx(c + sign * eps / 2, abs=1e-12)
    assert P.radius == pytest.approx(math.hypot(1, 1))


def test_solve_for_falls_back_to_other_variables():
    # u_x^2 cannot reach a negative target, the value coefficient can
    op = parse("dx(u)^2 + u = -1", ("x",))
    P = local_subsolution(op, -1.0, (0.5,), 0.1, bounds=((0.0, 1.0),))
    assert P.solved_for == (0,)
    assert audit_patch(op, -1.0, P, bounds=((0.0, 1.0),))[0]


def test_no_bracket():
    with pytest.raises(NoBracket):
        local_subsolution(parse("exp(u) = -1", ("x",)), -1.0, (0.5,), 0.1)


def test_radius_underflow():
    op = parse("dt(u) = f", ("t",))
    with pytest.raises(RadiusUnderflow):
        local_subsolution(op, lambda t: np.sin(1e4 * t), (0.5,), 0.01, min_radius=0.1)


def test_rejects_bad_side():
    with pytest.raises(ValueError):
        local_patch(IDENTITY, 5.0, (0.5, 0.5), 0.1, side="middle")


def test_global_identity_is_one_patch():
    grid = Grid(BOX, (11, 11))
    cover = build_cover(IDENTITY, 5.0, 0.1, grid)
    assert len(cover.patches) == 1 and cover.gamma_fraction == 0.0
    assert np.allclose(global_approx(IDENTITY, 5.0, 0.1, grid).values, 4.95, rtol=0, atol=1e-12)


def test_riccati_level_with_pin():
    grid = Grid(((0.0, 0.9),), (257,))
    cfg = SolverConfig(allow_scale=1000.0)
    u = global_approx(RICCATI, 0.0, 0.05, grid, "sub", [((0.0,), 1.0)], config=cfg)
    assert u.values[0] == 1.0
    allow = truncation_allowance(grid, Field.coerce(0.0, 1), cfg)
    assert band_audit(RICCATI, 0.0, u, 0.05, "sub", allow)["pass_fraction"] == 1.0
    assert u.mask.nowhere_dense()[0]


def test_burgers_shock_speed():
    case = get_case("burgers_riemann")
    grid = case.grid()
    pins = case.pins(grid)
    guide = viscous_guide(case.op, case.rhs, grid, pins)
    cover = build_cover(case.op, case.rhs, 0.1, grid, "sub", pins, guide=guide)
    assert band_audit(case.op, case.rhs, cover.fn, 0.1, "sub")["pass_fraction"] == 1.0
    assert abs(shock_locus(cover)["speed"] - 0.5) <= 0.1


def test_viscous_guide_keeps_riemann_data():
    case = get_case("burgers_riemann")
    grid = case.grid((33, 33))
    g = viscous_guide(case.op, case.rhs, grid, case.pins(grid))
    assert g.shape == grid.shape and np.all(g >= -1e-12) and np.all(g <= 1 + 1e-12)


@pytest.fixture(scope="module")
def identity_cut():
    return refine_cut(IDENTITY, 5.0, Grid(BOX, (11, 11)), 0.4, 3)


def test_identity_cut(identity_cut):
    cut = identity_cut
    assert cut.epsilons == [0.4, 0.2, 0.1, 0.05]
    assert abs(cut.image_defect - 0.025) <= 1e-12
    assert np.allclose(cut.lower.lo, 5 - 0.025, rtol=0, atol=1e-12)
    assert np.array_equal(cut.lower.lo, cut.lower.hi)
    assert np.allclose(cut.upper.hi, 5 + 0.025, rtol=0, atol=1e-12)
    assert cut.complete and len(cut.levels) == 8


def test_cut_json_bundle(identity_cut):
    data = identity_cut.to_json()
    assert set(data) >= {"epsilons", "levels", "lower", "upper", "image_defect"}
    assert set(data["levels"][0]) >= {"side", "fn", "gamma_fraction", "defect"}
    assert set(data["levels"][0]["defect"]) >= {"min", "max", "pass_fraction"}


def test_refine_cut_preconditions():
    with pytest.raises(ValueError):
        refine_cut(IDENTITY, 5.0, Grid(BOX, (5, 5)), 0.4, 0)
    with pytest.raises(ValueError):
        refine_cut(IDENTITY, 5.0, Grid(BOX, (5, 5)), -1.0, 2)


def test_epsilon_nesting():
    # every level-k patch is a valid patch for the coarser band of level k-1
    grid = Grid(((0.0, 0.9),), (65,))
    cut = refine_cut(RICCATI, 0.0, grid, 0.4, 3, [((0.0,), 1.0)], config=SolverConfig(allow_scale=1000.0))
    for cover in cut.covers:
        if cover.epsilon == 0.4:
            continue
        for P in cover.patches:
            coarse = dataclasses.replace(P, epsilon=2 * P.epsilon)
            assert audit_patch(RICCATI, 0.0, coarse, bounds=grid.bounds)[0]


def test_determinism():
    grid = Grid(BOX, (17, 17))
    f = parse_expression("-2*pi^2*sin(pi*x)*sin(pi*y)", ("x", "y"))
    pins = [(p, 0.0) for p in grid.points() if np.any((p == 0) | (p == 1))]
    a = refine_cut(LAPLACE, f, grid, 0.4, 2, pins).to_json()
    b = refine_cut(LAPLACE, f, grid, 0.4, 2, pins).to_json()
    assert a == b


def test_image_envelopes_bracket_f(identity_cut):
    assert np.all(identity_cut.image_lower.hi <= 5.0) and np.all(identity_cut.image_upper.lo >= 5.0)


def test_patch_values_match_poly():
    grid = Grid(((0.0, 0.9),), (33,))
    cover = build_cover(RICCATI, 0.0, 0.1, grid, "sub", [((0.0,), 1.0)], config=SolverConfig(allow_scale=1000.0))
    pts = grid.points()
    for j, P in enumerate(cover.patches):
        mine = (cover.owner == j) & cover.fn.defined.ravel()
        assert np.allclose(cover.fn.values.ravel()[mine], poly_eval(P.poly, pts[mine]), rtol=1e-12, atol=0)


# -- properties ---------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["sub", "super"]))
def test_band_monotone_in_epsilon(seed, side):
    inst = random_instance(np.random.default_rng(seed))
    op = parse(inst["equation"], inst["coords"])
    f = Field(op.dimension, node=parse_expression(inst["f"], op.coords))
    try:
        P = local_patch(op, f, inst["x0"], inst["eps"], side, bounds=inst["bounds"])
    except (NoBracket, RadiusUnderflow):
        return
    assert audit_patch(op, f, P, bounds=inst["bounds"])[0]
    wider = dataclasses.replace(P, epsilon=3 * P.epsilon)
    assert audit_patch(op, f, wider, bounds=inst["bounds"])[0]


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(1e-3, 1.0), st.floats(0.1, 0.9), st.floats(0.1, 0.9))
def test_laplacian_patch_is_exact_for_constant_rhs(c, eps, x, y):
    P = local_subsolution(LAPLACE, c, (x, y), eps, bounds=BOX)
    grid = Grid(BOX, (9, 9))
    U = PiecewiseFn.sample(grid, lambda a, b: poly_eval(P.poly, np.stack([a.ravel(), b.ravel()], 1)).reshape(a.shape))
    Tu = apply_operator(LAPLACE, U)
    assert np.allclose(Tu.values[1:-1, 1:-1], c - eps / 2, rtol=0, atol=1e-8 * (1 + abs(c)))
