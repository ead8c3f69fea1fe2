"""Benchmark problems with independent oracles, and the per-case audit.

A case file holds the equation in the operator grammar followed by TOML
sections::

    dt(u) = u^2

    [domain]
    coords = ["t"]
    bounds = [[0.0, 0.9]]
    resolution = [257]

    [pins]
    points = [[0.0, 1.0]]          # coordinates..., value

    [oracle]
    oracle = "closed_form:1/(1-t)"

    [solver]
    eps0 = 0.4
    levels = 4

``[pins]`` also accepts ``boundary = "<expr>"`` (every boundary node) and
``riemann = {left = 1.0, right = 0.0, at = 0.0}`` (the first-axis lower face,
``left`` below ``at`` on the second axis and ``right`` from ``at`` on).
``[rhs]`` binds a named right hand side: ``f = "<expr>"``. ``[solver]`` may
set ``eps0``, ``levels``, ``allow_scale`` and ``guide = "viscous"``.
"""
from __future__ import annotations

import math
import re
import sys
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .expr import ExprNode, OperatorSpec, ParseError, evaluate, parse, parse_expression, pretty
from .fnspaces import Grid, PiecewiseFn, SingularMask, apply_operator, manhattan_dilate
from .hausdorff import IntervalFn, graph_complete
from .solver import (
    Field,
    SolverConfig,
    SolverError,
    band_for,
    build_cover,
    refine_cut,
    rhs_field,
    viscous_guide,
)


class CaseError(ValueError):
    """A case file that cannot be turned into a benchmark case."""


@dataclass
class Oracle:
    """Reference solution: a closed-form expression or a Riemann-problem tracer."""

    kind: str
    node: ExprNode | None = None
    riemann: tuple[float, float, float] | None = None
    text: str = ""

    def __call__(self, *coords):
        coords = [np.asarray(c, dtype=float) for c in coords]
        if self.kind == "closed_form":
            with np.errstate(all="ignore"):
                return np.broadcast_to(evaluate(self.node, coords, {}), np.broadcast(*coords).shape).astype(float)
        left, right, at = self.riemann
        t, x = coords[0], coords[1]
        return riemann_burgers(t, x, left, right, at)

    @property
    def shock_speed(self) -> float | None:
        if self.kind != "characteristics":
            return None
        left, right, _ = self.riemann
        return 0.5 * (left + right) if left > right else None


def riemann_burgers(t, x, left: float, right: float, at: float = 0.0):
    """Entropy solution of ``u_t + u u_x = 0`` with a single jump at ``at``.

    A decreasing jump travels as a shock at the Rankine-Hugoniot speed
    ``(left + right) / 2``; an increasing one opens a centred rarefaction fan.
    """
    t = np.asarray(t, dtype=float)
    xi = np.asarray(x, dtype=float) - at
    if left > right:
        s = 0.5 * (left + right)
        return np.where(xi < s * t, left, right).astype(float)
    with np.errstate(all="ignore"):
        fan = np.where(t > 0, xi / np.where(t > 0, t, 1.0), np.where(xi < 0, left, right))
    return np.clip(fan, left, right).astype(float)


@dataclass
class BenchmarkCase:
    name: str
    source: str
    op: OperatorSpec
    rhs: Field
    bounds: tuple[tuple[float, float], ...]
    resolution: tuple[int, ...]
    pin_spec: dict
    oracle: Oracle | None
    eps0: float = 0.4
    levels: int = 3
    allow_scale: float | None = None
    guide: str | None = None
    thresholds: dict = field(default_factory=dict)

    def grid(self, resolution=None) -> Grid:
        res = self.resolution if resolution is None else tuple(resolution)
        if len(res) == 1 and len(self.bounds) > 1:
            res = res * len(self.bounds)
        return Grid(self.bounds, res)

    def f(self, point) -> float:
        return self.rhs.at(point)

    def pins(self, grid: Grid) -> list[tuple[tuple[float, ...], float]]:
        return make_pins(self.pin_spec, grid, self.op.coords)

    def config(self, **overrides) -> SolverConfig:
        kw = {"allow_scale": self.allow_scale}
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return SolverConfig(**kw)


def make_pins(spec: dict, grid: Grid, coords) -> list:
    pins = []
    pts = grid.points()
    for row in spec.get("points", []):
        if len(row) != grid.ndim + 1:
            raise CaseError(f"pin {row} needs {grid.ndim} coordinates and a value")
        pins.append((tuple(float(v) for v in row[:-1]), float(row[-1])))
    if "boundary" in spec:
        node = parse_expression(str(spec["boundary"]), coords)
        on_edge = np.zeros(len(pts), dtype=bool)
        for i, (lo, hi) in enumerate(grid.bounds):
            on_edge |= (pts[:, i] == lo) | (pts[:, i] == hi)
        vals = np.broadcast_to(evaluate(node, [pts[:, i] for i in range(grid.ndim)], {}), (len(pts),))
        pins.extend((tuple(p), float(v)) for p, v, e in zip(pts, vals, on_edge) if e)
    if "riemann" in spec:
        r = spec["riemann"]
        if grid.ndim < 2:
            raise CaseError("riemann pins need at least two coordinates")
        t0 = grid.bounds[0][0]
        for p in pts[pts[:, 0] == t0]:
            pins.append((tuple(p), float(r["left"] if p[1] < r.get("at", 0.0) else r["right"])))
    return pins


_SECTION = re.compile(r"^\s*\[[A-Za-z_]+\]\s*$", re.M)


def load_case(text: str, name: str = "case") -> BenchmarkCase:
    """Build a case from case-file text; raises ``ParseError`` or ``CaseError``."""
    m = _SECTION.search(text)
    head = text[: m.start()] if m else text
    body = text[m.start():] if m else ""
    lines = [ln.split("#", 1)[0] for ln in head.splitlines()]
    equation = " ".join(ln.strip() for ln in lines if ln.strip())
    if not equation:
        raise CaseError("case file has no equation")
    try:
        data = tomllib.loads(body)
    except tomllib.TOMLDecodeError as exc:
        raise CaseError(f"bad case file section: {exc}") from None
    domain = data.get("domain", {})
    coords = domain.get("coords")
    op = parse(equation, coords)
    if "bounds" not in domain:
        raise CaseError("[domain] needs bounds")
    bounds = tuple((float(a), float(b)) for a, b in domain["bounds"])
    if len(bounds) != op.dimension:
        raise CaseError(f"{len(bounds)} bounds for a {op.dimension}-dimensional operator")
    resolution = tuple(int(r) for r in domain.get("resolution", [33] * op.dimension))
    if op.rhs is None:
        rhs_src = data.get("rhs", {}).get(op.rhs_label)
        if rhs_src is None:
            raise CaseError(f"no [rhs] entry for {op.rhs_label!r}")
        rhs = Field(op.dimension, node=parse_expression(str(rhs_src), op.coords))
    else:
        rhs = rhs_field(op)
    pin_spec = data.get("pins", {})
    oracle = None
    oracle_src = data.get("oracle", {}).get("oracle")
    if oracle_src is not None:
        oracle = make_oracle(str(oracle_src), op, pin_spec, data.get("oracle", {}))
    solver = data.get("solver", {})
    return BenchmarkCase(
        name=str(data.get("name", name)),
        source=equation,
        op=op,
        rhs=rhs,
        bounds=bounds,
        resolution=resolution,
        pin_spec=pin_spec,
        oracle=oracle,
        eps0=float(solver.get("eps0", 0.4)),
        levels=int(solver.get("levels", 3)),
        allow_scale=solver.get("allow_scale"),
        guide=solver.get("guide"),
        thresholds=dict(data.get("thresholds", {})),
    )


def make_oracle(src: str, op: OperatorSpec, pin_spec: dict, section: dict) -> Oracle:
    if src.startswith("closed_form:"):
        return Oracle("closed_form", node=parse_expression(src[len("closed_form:"):], op.coords), text=src)
    if src == "characteristics":
        r = section.get("riemann") or pin_spec.get("riemann")
        if r is None:
            raise CaseError("characteristics oracle needs riemann data")
        return Oracle("characteristics", riemann=(float(r["left"]), float(r["right"]), float(r.get("at", 0.0))), text=src)
    raise CaseError(f"unknown oracle {src!r}")


BUILTIN_SOURCES = {
    "riccati": """
dt(u) = u^2

[domain]
coords = ["t"]
bounds = [[0.0, 0.9]]
resolution = [257]

[pins]
points = [[0.0, 1.0]]

[oracle]
oracle = "closed_form:1/(1-t)"

[solver]
eps0 = 0.4
levels = 4
# the oracle's third derivative reaches 6e4 near t = 0.9
allow_scale = 1000.0

[thresholds]
gamma_fraction = 0.15
""",
    "burgers_riemann": """
dt(u) + u*dx(u) = 0

[domain]
coords = ["t", "x"]
bounds = [[0.0, 1.0], [-1.0, 1.0]]
resolution = [129, 129]

[pins]
riemann = { left = 1.0, right = 0.0, at = 0.0 }

[oracle]
oracle = "characteristics"

[solver]
eps0 = 0.4
levels = 2
guide = "viscous"

[thresholds]
shock_speed_tolerance = 0.1
""",
    "poisson_square": """
dxx(u) + dyy(u) = f

[domain]
coords = ["x", "y"]
bounds = [[0.0, 1.0], [0.0, 1.0]]
resolution = [65, 65]

[rhs]
f = "-2*pi^2*sin(pi*x)*sin(pi*y)"

[pins]
boundary = "0"

[oracle]
oracle = "closed_form:sin(pi*x)*sin(pi*y)"

[solver]
eps0 = 0.4
levels = 4

[thresholds]
oracle_residual = 0.01
""",
    "identity_smoke": """
u = 5

[domain]
coords = ["x", "y"]
bounds = [[0.0, 1.0], [0.0, 1.0]]
resolution = [11, 11]

[oracle]
oracle = "closed_form:5"

[solver]
eps0 = 0.4
levels = 3

[thresholds]
exact_image_defect = true
""",
}


def builtin_cases() -> list[BenchmarkCase]:
    return [load_case(src, name) for name, src in BUILTIN_SOURCES.items()]


def case_names() -> list[str]:
    return list(BUILTIN_SOURCES)


def get_case(name: str) -> BenchmarkCase:
    if name not in BUILTIN_SOURCES:
        raise KeyError(name)
    return load_case(BUILTIN_SOURCES[name], name)


# ---------------------------------------------------------------------------
# audits


def jump_mask(grid: Grid, values: np.ndarray) -> np.ndarray:
    """Nodes on either side of a discrete jump of ``values``."""
    completed = graph_complete(IntervalFn.from_values(grid, values))
    return manhattan_dilate(~completed.degenerate, 1)


def oracle_function(case: BenchmarkCase, grid: Grid) -> PiecewiseFn:
    """Oracle samples with the nodes next to its own jumps masked out."""
    vals = np.asarray(case.oracle(*grid.mesh()), dtype=float).reshape(grid.shape)
    mask = jump_mask(grid, vals) | ~np.isfinite(vals)
    return PiecewiseFn(grid, np.where(mask, np.nan, vals), SingularMask(mask), 99)


def oracle_residual(case: BenchmarkCase, grid: Grid) -> tuple[float, np.ndarray]:
    """Max ``|T u* - f|`` over nodes where the stencil applies, and the raw residual."""
    Tu = apply_operator(case.op, oracle_function(case, grid))
    R = Tu.values - case.rhs.on_grid(grid)
    live = Tu.defined & np.isfinite(R)
    return (float(np.abs(R[live]).max()) if live.any() else math.nan), np.where(live, R, np.nan)


def shock_locus(cover, t_min: float = 0.1) -> dict:
    """Fit ``x = s t + b`` to the large jumps across the singular set.

    In each row of constant ``t`` the jumps are the adjacent node pairs, at
    least one in the singular set, whose patch values differ by more than half
    the value range; the row's locus is the mean pair midpoint.
    """
    grid = cover.grid
    raw = cover.raw
    gamma = cover.gamma.marked
    t_axis, x_axis = grid.axes()[0], grid.axes()[1]
    span = np.nanmax(raw) - np.nanmin(raw)
    ts, xs = [], []
    for i, t in enumerate(t_axis):
        if t < t_min:
            continue
        row, g = raw[i], gamma[i]
        if row.ndim > 1:
            row, g = row.reshape(len(x_axis), -1)[:, 0], g.reshape(len(x_axis), -1)[:, 0]
        jumps = np.abs(np.diff(row)) > 0.5 * span
        jumps &= g[:-1] | g[1:]
        if jumps.any():
            ts.append(t)
            xs.append(float(np.mean(0.5 * (x_axis[:-1] + x_axis[1:])[jumps])))
    if len(ts) < 2:
        return {"speed": None, "intercept": None, "rows": len(ts)}
    s, b = np.polyfit(np.array(ts), np.array(xs), 1)
    return {"speed": float(s), "intercept": float(b), "rows": len(ts)}


def _finest_cover(cut, side):
    covers = [c for c in cut.covers if c.side == side]
    return covers[-1] if covers else None


def run_case(case: BenchmarkCase, resolution=None, eps0: float | None = None, K: int | None = None,
             config: SolverConfig | None = None, doubling: bool = True) -> dict:
    """Solve and audit one case; solver errors are captured, never raised."""
    return solve_case(case, resolution, eps0, K, config, doubling)[0]


def solve_case(case: BenchmarkCase, resolution=None, eps0: float | None = None, K: int | None = None,
               config: SolverConfig | None = None, doubling: bool = True):
    """``run_case`` that also hands back the ``CutSolution`` (``None`` on error)."""
    eps0 = case.eps0 if eps0 is None else eps0
    K = case.levels if K is None else K
    grid = case.grid(resolution)
    cfg = config or case.config()
    report = {
        "case": case.name,
        "equation": pretty(case.op),
        "grid": grid.to_json(),
        "eps0": eps0,
        "levels": K,
        "status": "ok",
        "error": None,
        "checks": {},
    }
    checks = report["checks"]
    try:
        pins = case.pins(grid)
        guide = viscous_guide(case.op, case.rhs, grid, pins) if case.guide == "viscous" else None
        cut = refine_cut(case.op, case.rhs, grid, eps0, K, pins, config=cfg, guide=guide)
    except (SolverError, ValueError) as exc:
        report["status"] = "solver_error"
        report["error"] = f"{type(exc).__name__}: {exc}"
        report["passed"] = False
        return report, None
    eps_K = eps0 / 2**K
    allowance = cut.allowance
    report["allowance"] = allowance
    report["epsilons"] = cut.epsilons
    report["failures"] = cut.failures
    if cut.failures:
        report["status"] = "incomplete"
    report["level_reports"] = [
        {
            "side": lv.side,
            "epsilon": lv.epsilon,
            "patches": lv.patches,
            "gamma_fraction": lv.gamma_fraction,
            "nowhere_dense": lv.fn.mask.nowhere_dense()[0],
            "defect": lv.defect,
        }
        for lv in cut.levels
    ]
    report["image_defect"] = cut.image_defect
    report["image_defect_bound"] = eps_K + allowance
    checks["complete"] = not cut.failures
    checks["image_defect"] = bool(cut.image_defect <= eps_K + allowance)
    finest = [lv for lv in cut.levels if lv.epsilon == eps_K]
    checks["finest_pass_fraction"] = bool(finest) and all(lv.defect["pass_fraction"] >= 0.99 for lv in finest)
    checks["nowhere_dense"] = all(r["nowhere_dense"] for r in report["level_reports"])

    # cut ordering: value space where both ends are finite, image space always
    if cut.lower is not None and cut.upper is not None:
        both = np.isfinite(cut.lower.lo) & np.isfinite(cut.upper.hi)
        report["value_ordering"] = bool(np.all(cut.lower.lo[both] <= cut.upper.hi[both]))
        ib = np.isfinite(cut.image_lower.lo) & np.isfinite(cut.image_upper.hi)
        checks["image_ordering"] = bool(np.all(cut.image_lower.lo[ib] <= cut.image_upper.hi[ib]))

    if case.oracle is not None:
        worst, R = oracle_residual(case, grid)
        report["oracle_residual"] = worst
        checks["oracle_self_consistent"] = bool(worst <= allowance)
        live = np.isfinite(R)
        inside = np.abs(R[live]) <= eps_K + allowance
        report["oracle_containment"] = float(inside.mean()) if live.any() else 0.0
        checks["oracle_containment"] = report["oracle_containment"] >= 0.99
        if "oracle_residual" in case.thresholds:
            checks["oracle_residual"] = bool(worst <= case.thresholds["oracle_residual"])
        speed = case.oracle.shock_speed
        if speed is not None:
            cover = _finest_cover(cut, "sub")
            locus = shock_locus(cover)
            locus["oracle_speed"] = speed
            report["shock"] = locus
            tol = case.thresholds.get("shock_speed_tolerance", 0.1)
            checks["shock_speed"] = locus["speed"] is not None and abs(locus["speed"] - speed) <= tol

    if case.thresholds.get("exact_image_defect"):
        checks["exact_image_defect"] = bool(abs(cut.image_defect - eps_K / 2) <= 1e-12)
    if "gamma_fraction" in case.thresholds:
        checks["gamma_fraction"] = all(lv.gamma_fraction <= case.thresholds["gamma_fraction"] for lv in cut.levels)

    if doubling:
        report["refinement"] = refinement_check(case, grid, eps_K, cfg)
        checks["gamma_refinement"] = report["refinement"]["non_increasing"]
    report["passed"] = all(checks.values())
    return report, cut


def refinement_check(case: BenchmarkCase, grid: Grid, eps: float, cfg: SolverConfig) -> dict:
    """Singular-set fraction at ``eps`` on ``grid`` and on the doubled grid."""
    out = {"resolution": [list(grid.resolution), list(grid.refined().resolution)], "sides": {}}
    ok = True
    for side in ("sub", "super"):
        fractions = []
        for g in (grid, grid.refined()):
            pins = case.pins(g)
            guide = viscous_guide(case.op, case.rhs, g, pins) if case.guide == "viscous" else None
            try:
                fractions.append(build_cover(case.op, case.rhs, eps, g, side, pins, config=cfg, guide=guide).gamma_fraction)
            except SolverError as exc:
                fractions.append(None)
                out.setdefault("errors", []).append(str(exc))
        out["sides"][side] = fractions
        ok &= None not in fractions and fractions[1] <= fractions[0]
    out["non_increasing"] = bool(ok)
    return out
