import math

import numpy as np
import pytest

from ordcut.bench import (
    CaseError,
    builtin_cases,
    case_names,
    get_case,
    load_case,
    oracle_residual,
    riemann_burgers,
    run_case,
)
from ordcut.expr import ParseError
from ordcut.solver import SolverConfig, truncation_allowance


def test_builtin_names():
    assert case_names() == ["riccati", "burgers_riemann", "poisson_square", "identity_smoke"]
    assert [c.name for c in builtin_cases()] == case_names()


def test_riccati_oracle():
    assert get_case("riccati").oracle(np.array(0.5)) == 2.0


def test_burgers_oracle():
    oracle = get_case("burgers_riemann").oracle
    assert oracle(1.0, 0.4) == 1.0 and oracle(1.0, 0.6) == 0.0
    assert oracle.shock_speed == 0.5


def test_rarefaction_has_no_shock():
    assert riemann_burgers(1.0, 0.25, 0.0, 1.0) == 0.25


def test_poisson_rhs():
    assert get_case("poisson_square").f((0.5, 0.5)) == pytest.approx(-2 * math.pi**2, rel=1e-15)


def test_poisson_pins_are_the_boundary():
    case = get_case("poisson_square")
    grid = case.grid()
    pins = case.pins(grid)
    assert len(pins) == 4 * 64 and all(v == 0.0 for _, v in pins)


def test_burgers_pins_on_initial_line():
    case = get_case("burgers_riemann")
    pins = case.pins(case.grid())
    assert len(pins) == 129 and all(p[0] == 0.0 for p, _ in pins)
    assert {v for p, v in pins if p[1] < 0} == {1.0} and {v for p, v in pins if p[1] >= 0} == {0.0}


@pytest.mark.parametrize("name", ["riccati", "burgers_riemann", "poisson_square", "identity_smoke"])
def test_oracles_satisfy_their_equations(name):
    case = get_case(name)
    grid = case.grid()
    worst, _ = oracle_residual(case, grid)
    assert worst <= truncation_allowance(grid, case.rhs, case.config())


def test_poisson_truncation_oracle():
    case = get_case("poisson_square")
    coarse, _ = oracle_residual(case, case.grid())
    fine, _ = oracle_residual(case, case.grid().refined())
    assert coarse <= 0.01
    assert 3.5 < coarse / fine < 4.5


def test_grid_override_broadcasts():
    assert get_case("poisson_square").grid((17,)).resolution == (17, 17)


def test_config_overrides():
    cfg = get_case("riccati").config(samples_per_axis=7, radius_cap=None)
    assert cfg == SolverConfig(samples_per_axis=7, allow_scale=1000.0)


CASE_TEXT = """
dxx(u) = g   # comment

[domain]
coords = ["x"]
bounds = [[0.0, 1.0]]
resolution = [21]

[rhs]
g = "2"

[oracle]
oracle = "closed_form:x^2"
"""


def test_load_user_case():
    case = load_case(CASE_TEXT, "parabola")
    assert case.name == "parabola" and case.resolution == (21,) and case.f((0.3,)) == 2.0
    assert case.oracle(np.array(0.5)) == 0.25


@pytest.mark.parametrize(
    "text, message",
    [
        ("", "no equation"),
        ("u = 1\n[domain]\ncoords = ['x']\n", "bounds"),
        ("u = 1\n[domain]\ncoords = ['x']\nbounds = [[0, 1], [0, 1]]\n", "bounds for a 1-dimensional"),
        ("dxx(u) = g\n[domain]\ncoords = ['x']\nbounds = [[0, 1]]\n", "no [rhs]"),
        ("u = 1\n[domain]\ncoords = ['x']\nbounds = [[0, 1]]\n[oracle]\noracle = 'magic'\n", "unknown oracle"),
        ("u = 1\n[domain]\nbounds = [[0, 1\n", "bad case file"),
    ],
)
def test_case_errors(text, message):
    with pytest.raises(CaseError, match=message.replace("[", r"\[")):
        load_case(text)


def test_equation_errors_carry_offsets():
    with pytest.raises(ParseError) as info:
        load_case("dt(u +\n[domain]\nbounds = [[0, 1]]\n")
    assert info.value.offset == 5


def test_unknown_builtin():
    with pytest.raises(KeyError):
        get_case("lewy")


def test_run_identity():
    report = run_case(get_case("identity_smoke"))
    assert report["passed"] and report["status"] == "ok"
    assert report["image_defect"] == pytest.approx(0.025, abs=1e-12)
    assert all(r["defect"]["pass_fraction"] == 1.0 for r in report["level_reports"])
    assert report["refinement"]["non_increasing"]


def test_solver_errors_are_captured():
    case = load_case("exp(u) = -1\n[domain]\ncoords = ['x']\nbounds = [[0, 1]]\nresolution = [9]\n")
    report = run_case(case, K=1)
    assert report["status"] == "incomplete" and not report["passed"]
    assert report["failures"][0].startswith("level 0 (sub, eps=0.4): ")
    assert "uncovered, first [0, 1, 2" in report["failures"][0]
