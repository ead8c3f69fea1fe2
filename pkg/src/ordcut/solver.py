"""Local polynomial sub/super-solutions, their global assembly, and the cut.

A *sub-solution patch* at ``x0`` is a polynomial ``P`` and a radius ``delta``
with ``f - eps <= T P <= f`` on the ball of radius ``delta`` (sampled); a
super-solution patch satisfies ``f <= T P <= f + eps``. Patches are built by
fixing every jet coefficient but one, solving ``F(x0, jet) = f(x0) -+ eps/2``
for that one by bracketing and bisection, and then choosing coefficients of
degree above the operator order so that the Taylor expansion of ``T P - f``
vanishes to as high an order as the polynomial degree allows. The radius is
found by halving from a cap.

Patches are stamped onto a grid greedily in row-major order. Nodes where two
patches meet, and nodes where no acceptable patch exists, form the singular
set. Repeating this for ``eps_k = eps0 / 2**k`` on both sides gives the two
families whose envelopes bracket the solution.
"""
from __future__ import annotations

import itertools
from functools import lru_cache
import logging
import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from . import rootfind
from .expr import ExprNode, OperatorSpec, eval_operator, evaluate, evaluate_series, free_jet_variables
from .fnspaces import Grid, PiecewiseFn, SingularMask, apply_operator, difference, manhattan_dilate
from .hausdorff import IntervalFn, graph_complete, inf_family, sup_family
from .jets import (
    JetPolynomial,
    TaylorSeries,
    mi_factorial,
    multi_indices,
    poly_derivatives_at,
    poly_eval,
    recenter,
    series_from_jet,
)

log = logging.getLogger(__name__)

SIDES = ("sub", "super")


class SolverError(Exception):
    pass


class NoBracket(SolverError):
    pass


class RadiusUnderflow(SolverError):
    pass


class EvalFault(SolverError):
    pass


class CoverIncomplete(SolverError):
    def __init__(self, message: str, nodes: Sequence[int]):
        self.nodes = [int(k) for k in nodes]
        super().__init__(f"{message}; {len(self.nodes)} node(s) uncovered, first {self.nodes[:10]}")


@dataclass(frozen=True)
class SolverConfig:
    samples_per_axis: int = 5
    radius_cap: float | None = None
    retry_budget: int = 6
    band_margin: float = 0.125
    extra_degree: int | None = None
    max_doublings: int = 60
    refine_steps: int = 3
    pin_tolerance: float = 0.5
    guide_tolerance: float = 0.5
    allow_factor: float = 10.0
    allow_scale: float | None = None
    audit_factor: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_axis < 1 or self.retry_budget < 1 or self.audit_factor < 1:
            raise ValueError("sample counts and retry budget must be positive")
        if not 0 <= self.band_margin < 0.5:
            raise ValueError("band_margin must lie in [0, 0.5)")
        if self.radius_cap is not None and self.radius_cap <= 0:
            raise ValueError("radius_cap must be positive")

    def degree(self, op: OperatorSpec) -> int:
        extra = self.extra_degree
        if extra is None:
            extra = {1: 10, 2: 6}.get(op.dimension, 3)
        return op.order + extra


# ---------------------------------------------------------------------------
# right hand sides


class Field:
    """A scalar right hand side ``f(x)``: an expression, a constant or a callable."""

    def __init__(self, dimension: int, node: ExprNode | None = None, func: Callable | None = None, value: float | None = None):
        self.dimension = dimension
        self.node = node
        self.func = func
        self.value = value

    @classmethod
    def coerce(cls, f, dimension: int) -> "Field":
        if isinstance(f, Field):
            return f
        if isinstance(f, ExprNode):
            return cls(dimension, node=f)
        if callable(f):
            return cls(dimension, func=f)
        return cls(dimension, value=float(f))

    def values(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        cols = [pts[:, i] for i in range(self.dimension)]
        if self.node is not None:
            with np.errstate(all="ignore"):
                out = evaluate(self.node, cols, {})
        elif self.func is not None:
            out = self.func(*cols)
        else:
            out = self.value
        return np.broadcast_to(np.asarray(out, dtype=float), (pts.shape[0],)).copy()

    def at(self, x) -> float:
        return float(self.values(np.asarray(x, dtype=float)[None, :])[0])

    def on_grid(self, grid: Grid) -> np.ndarray:
        return self.values(grid.points()).reshape(grid.shape)

    def series(self, center, d: int) -> TaylorSeries:
        n = self.dimension
        if self.node is not None:
            cs = [TaylorSeries.variable(i, center[i], n, d) for i in range(n)]
            s = evaluate_series(self.node, cs, {})
            if isinstance(s, TaylorSeries):
                return s
            return TaylorSeries.constant(float(s), n, d)
        # callables carry no derivative information; treat as locally constant
        return TaylorSeries.constant(self.at(center), n, d)


def rhs_field(op: OperatorSpec, f=None) -> Field:
    if f is not None:
        return Field.coerce(f, op.dimension)
    if op.rhs is None:
        raise ValueError(f"right hand side {op.rhs_label!r} needs a field")
    return Field(op.dimension, node=op.rhs)


# ---------------------------------------------------------------------------
# local patches


@dataclass(frozen=True)
class LocalPatch:
    center: tuple[float, ...]
    radius: float
    poly: JetPolynomial
    epsilon: float
    side: str
    defect_stats: tuple[float, float]
    solved_for: tuple[int, ...] = ()

    def band(self) -> tuple[float, float]:
        return band_for(self.side, self.epsilon)


def band_for(side: str, eps: float, margin: float = 0.0) -> tuple[float, float]:
    if side == "sub":
        return -eps + margin * eps, -margin * eps
    if side == "super":
        return margin * eps, eps - margin * eps
    raise ValueError(f"side must be 'sub' or 'super', got {side!r}")


def _sign(side: str) -> float:
    return -1.0 if side == "sub" else 1.0


def patch_defect(op: OperatorSpec, f: Field, poly: JetPolynomial, pts) -> np.ndarray:
    """``(T P)(x) - f(x)`` at each row of ``pts``, evaluated exactly (``nan`` on faults)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    jets = poly_derivatives_at(poly, _jet_vars(op), pts)
    cols = [pts[:, i] for i in range(op.dimension)]
    with np.errstate(all="ignore"):
        F = np.broadcast_to(evaluate(op.lhs, cols, jets), (pts.shape[0],))
    return F - f.values(pts)



@lru_cache(maxsize=None)
def _jet_vars(op: OperatorSpec) -> tuple[tuple[int, ...], ...]:
    return tuple(free_jet_variables(op))


@lru_cache(maxsize=None)
def _directions(n: int) -> np.ndarray:
    """Unit vectors along the axes and every diagonal of the unit cube."""
    dirs = [np.array(v, dtype=float) for v in itertools.product((-1, 0, 1), repeat=n) if any(v)]
    dirs.sort(key=lambda v: (np.count_nonzero(v), tuple(-v)))
    return np.array([v / np.linalg.norm(v) for v in dirs])


def _clip(pts: np.ndarray, bounds) -> np.ndarray:
    if bounds is None:
        return pts
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return np.clip(pts, lo, hi)


def ball_samples(center, radius: float, per_axis: int, bounds=None) -> np.ndarray:
    """Center plus ``per_axis`` equally spaced points along each sampling ray."""
    c = np.asarray(center, dtype=float)
    radii = radius * np.arange(1, per_axis + 1) / per_axis
    dirs = _directions(c.size)
    pts = c + (dirs[:, None, :] * radii[None, :, None]).reshape(-1, c.size)
    return _clip(np.vstack([c[None, :], pts]), bounds)


def audit_samples(center, radius: float, per_axis: int, factor: int, seed: int = 0, bounds=None) -> np.ndarray:
    """A sample ``factor`` times denser than construction, plus random ball points."""
    c = np.asarray(center, dtype=float)
    rays = ball_samples(c, radius, per_axis * factor, bounds)
    rng = np.random.default_rng(seed)
    k = factor * (1 + per_axis * len(_directions(c.size)))
    g = rng.standard_normal((k, c.size))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = radius * rng.random(k) ** (1.0 / c.size)
    return np.vstack([rays, _clip(c + g * r[:, None], bounds)])


@lru_cache(maxsize=None)
def _confirm_offsets(n: int, per_axis: int) -> np.ndarray:
    """Fixed offsets in the unit ball: 3x denser rays, a lattice and a deterministic scatter."""
    rays = ball_samples(np.zeros(n), 1.0, 3 * per_axis)
    side = np.linspace(-1.0, 1.0, {1: 16, 2: 8}.get(n, 4) * per_axis + 1)
    lattice = np.stack(np.meshgrid(*[side] * n, indexing="ij"), axis=-1).reshape(-1, n)
    lattice = lattice[np.linalg.norm(lattice, axis=1) <= 1.0]
    rng = np.random.default_rng(20240917)
    k = 4 * (1 + per_axis * len(_directions(n)))
    g = rng.standard_normal((k, n))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return np.vstack([rays, lattice, g * rng.random(k)[:, None] ** (1.0 / n)])


def _degree_blocks(n: int, d: int) -> list[list[tuple[int, ...]]]:
    blocks = [[] for _ in range(d + 1)]
    for p in multi_indices(n, d):
        blocks[sum(p)].append(p)
    return blocks


def _jet_partials(op: OperatorSpec, x0, jet: dict, variables) -> dict:
    out = {}
    for p in variables:
        a = jet[p]
        h = 1e-6 * max(1.0, abs(a))
        up, dn = dict(jet), dict(jet)
        up[p], dn[p] = a + h, a - h
        out[p] = (eval_operator(op, x0, up) - eval_operator(op, x0, dn)) / (2 * h)
    return out


def _flatten(op: OperatorSpec, f: Field, coeffs: dict, x0, d: int) -> dict:
    """Make the Taylor coefficients of ``T P - f`` of degree ``1..d-m`` vanish.

    The degree-``k`` coefficients of the defect are affine in the degree
    ``k + m`` jet entries, with the matrix given by the partial derivatives of
    ``F`` in its top-order jet variables at ``x0``, so each degree is one
    (least-squares, minimum-norm) linear solve.
    """
    n, m = op.dimension, op.order
    variables = _jet_vars(op)
    top = [p for p in variables if sum(p) == m]
    partials = _jet_partials(op, x0, {p: coeffs[p] for p in variables}, top)
    if not all(math.isfinite(v) for v in partials.values()):
        return coeffs
    blocks = _degree_blocks(n, d)
    cs = [TaylorSeries.variable(i, x0[i], n, d) for i in range(n)]
    fs = f.series(x0, d)
    coeffs = dict(coeffs)
    for k in range(1, d - m + 1):
        poly = JetPolynomial(tuple(x0), d, coeffs)
        jets = {p: series_from_jet(poly, p, d) for p in variables}
        with np.errstate(all="ignore"):
            D = evaluate_series(op.lhs, cs, jets)
        D = D - fs if isinstance(D, TaylorSeries) else fs.scale(-1.0) + float(D)
        rows = blocks[k]
        cols = blocks[k + m]
        rhs = np.array([-D.coeff(q) for q in rows])
        if not np.all(np.isfinite(rhs)):
            break
        col_of = {s: j for j, s in enumerate(cols)}
        A = np.zeros((len(rows), len(cols)))
        for i, q in enumerate(rows):
            qf = mi_factorial(q)
            for p in top:
                A[i, col_of[tuple(a + b for a, b in zip(q, p))]] += partials[p] / qf
        delta = np.linalg.lstsq(A, rhs, rcond=None)[0]
        for s, v in zip(cols, delta):
            coeffs[s] += float(v)
    return coeffs


def _search_radius(check: Callable[[float], bool], cap: float, min_radius: float, refine_steps: int) -> float:
    r = cap
    while not check(r):
        r *= 0.5
        if r < min_radius:
            raise RadiusUnderflow(f"band not met for any radius >= {min_radius:g}")
    lo, hi = r, min(2 * r, cap)
    if lo < cap:
        for _ in range(refine_steps):
            mid = 0.5 * (lo + hi)
            if check(mid):
                lo = mid
            else:
                hi = mid
    return lo


def _local_patch(
    op: OperatorSpec,
    f: Field,
    x0,
    eps: float,
    side: str,
    seed_jet: dict | None,
    cfg: SolverConfig,
    bounds,
    cap: float,
    min_radius: float,
    region_ok: Callable | None,
    solve_for: tuple[int, ...] | None = None,
) -> LocalPatch:
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    x0 = tuple(float(v) for v in x0)
    n, m = op.dimension, op.order
    if len(x0) != n:
        raise ValueError(f"point has {len(x0)} coordinates, operator has dimension {n}")
    variables = _jet_vars(op)
    if not variables:
        raise NoBracket("operator has no jet variable to solve for")
    head = variables[0] if solve_for is None else tuple(solve_for)
    d = cfg.degree(op) if sum(head) == m else m
    coeffs = {p: 0.0 for p in multi_indices(n, d)}
    for p, a in (seed_jet or {}).items():
        p = tuple(p)
        if p in coeffs and math.isfinite(a):
            coeffs[p] = float(a)

    f0 = f.at(x0)
    if not math.isfinite(f0):
        raise EvalFault(f"right hand side faults at {x0}")
    target = f0 + _sign(side) * eps / 2

    def g(t):
        jet = {p: coeffs[p] for p in variables}
        jet[head] = t
        return eval_operator(op, x0, jet) - target

    try:
        coeffs[head] = rootfind.solve(g, center=coeffs[head], max_doublings=cfg.max_doublings)
    except rootfind.NoBracketFound as exc:
        raise NoBracket(f"solving for {head} at {x0}: {exc}") from None
    if sum(head) == m and d > m:
        coeffs = _flatten(op, f, coeffs, x0, d)
    poly = JetPolynomial(x0, d, coeffs)

    lo, hi = band_for(side, eps, cfg.band_margin)
    state = {}

    def check(r):
        pts = ball_samples(x0, r, cfg.samples_per_axis, bounds)
        D = patch_defect(op, f, poly, pts)
        if not (np.all(np.isfinite(D)) and D.min() >= lo and D.max() <= hi):
            return False
        if region_ok is not None and not region_ok(poly, r):
            return False
        state[r] = (float(D.min()), float(D.max()))
        return True

    # the ray samples can straddle a narrow excursion; confirm on a denser set
    # against half the margin and shrink until it holds
    c_lo, c_hi = band_for(side, eps, 0.5 * cfg.band_margin)
    offsets = _confirm_offsets(n, cfg.samples_per_axis)

    def confirmed(r):
        D = patch_defect(op, f, poly, _clip(np.asarray(x0) + r * offsets, bounds))
        return bool(np.all(np.isfinite(D)) and D.min() >= c_lo and D.max() <= c_hi)

    r = _search_radius(check, cap, min_radius, cfg.refine_steps)
    while not confirmed(r):
        if 0.5 * r < min_radius:
            raise RadiusUnderflow(f"band not confirmed for any radius >= {min_radius:g}")
        r = _search_radius(check, 0.5 * r, min_radius, 0)
    return LocalPatch(x0, r, poly, eps, side, state[r], head)


def _default_cap(x0, bounds) -> float:
    if bounds is None:
        return 1.0
    return float(math.hypot(*[b[1] - b[0] for b in bounds]))


def local_patch(op, f, x0, eps, side="sub", seed_jet=None, *, config=None, bounds=None,
                radius_cap=None, min_radius=None, region_ok=None, solve_for=None) -> LocalPatch:
    """One ``eps``-band patch at ``x0``; tries every jet variable on ``NoBracket``.

    ``bounds`` (a box) clips the sample points; ``radius_cap`` defaults to the
    box diagonal and ``min_radius`` to ``2**-20`` times the cap.
    """
    cfg = config or SolverConfig()
    f = Field.coerce(f, op.dimension)
    cap = radius_cap or cfg.radius_cap or _default_cap(x0, bounds)
    min_radius = min_radius if min_radius is not None else cap * 2.0**-20
    heads = [tuple(solve_for)] if solve_for is not None else list(_jet_vars(op))
    errors = []
    for head in heads:
        try:
            return _local_patch(op, f, x0, eps, side, seed_jet, cfg, bounds, cap, min_radius, region_ok, head)
        except NoBracket as exc:
            errors.append(str(exc))
    raise NoBracket("; ".join(errors) or "no jet variable")


def local_subsolution(op, f, x0, eps, seed_jet=None, **kw) -> LocalPatch:
    """Patch with ``f - eps <= T P <= f`` on its sampled ball."""
    return local_patch(op, f, x0, eps, "sub", seed_jet, **kw)


def local_supersolution(op, f, x0, eps, seed_jet=None, **kw) -> LocalPatch:
    """Patch with ``f <= T P <= f + eps`` on its sampled ball."""
    return local_patch(op, f, x0, eps, "super", seed_jet, **kw)


def audit_patch(op: OperatorSpec, f, patch: LocalPatch, *, factor: int = 10, per_axis: int = 5,
                seed: int = 0, bounds=None, tol: float = 1e-9) -> tuple[bool, float, float]:
    """Re-check the band on a denser sample of the patch's ball."""
    f = Field.coerce(f, op.dimension)
    pts = audit_samples(patch.center, patch.radius, per_axis, factor, seed, bounds)
    D = patch_defect(op, f, patch.poly, pts)
    lo, hi = patch.band()
    if not np.all(np.isfinite(D)):
        return False, math.nan, math.nan
    ok = bool(D.min() >= lo - tol and D.max() <= hi + tol)
    return ok, float(D.min()), float(D.max())


# ---------------------------------------------------------------------------
# global assembly


@dataclass
class Cover:
    """Everything the greedy cover produced, for audit and diagnostics."""

    grid: Grid
    side: str
    epsilon: float
    patches: list[LocalPatch]
    owner: np.ndarray
    raw: np.ndarray
    failed: np.ndarray
    gamma: SingularMask
    fn: PiecewiseFn
    warnings: list[str] = dc_field(default_factory=list)

    @property
    def gamma_fraction(self) -> float:
        return self.gamma.fraction


class _NodeIndex:
    """Grid nodes inside a ball, found through the bounding index box."""

    def __init__(self, grid: Grid):
        self.grid = grid
        self.axes = grid.axes()
        self.lo = np.array([b[0] for b in grid.bounds])
        self.h = np.array(grid.spacing)
        self.res = np.array(grid.resolution)
        self.strides = np.array([int(np.prod(grid.resolution[i + 1:])) for i in range(grid.ndim)])

    def ball(self, center, radius: float) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(center, dtype=float)
        r = radius * (1 + 1e-12)
        first = np.maximum(np.ceil((c - r - self.lo) / self.h - 1e-9), 0).astype(int)
        last = np.minimum(np.floor((c + r - self.lo) / self.h + 1e-9), self.res - 1).astype(int)
        if np.any(last < first):
            return np.zeros(0, dtype=int), np.zeros((0, c.size))
        ranges = [np.arange(a, b + 1) for a, b in zip(first, last)]
        idx = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, c.size)
        pts = self.lo + idx * self.h
        keep = np.sum((pts - c) ** 2, axis=1) <= r * r
        return idx[keep] @ self.strides, pts[keep]

    def neighbors(self, flat: int) -> np.ndarray:
        idx = np.array(np.unravel_index(flat, self.grid.shape))
        out = []
        for off in itertools.product((-1, 0, 1), repeat=self.grid.ndim):
            j = idx + off
            if any(off) and np.all(j >= 0) and np.all(j < self.res):
                out.append(int(j @ self.strides))
        return np.array(out, dtype=int)


def _region_rank(owner: np.ndarray, failed: np.ndarray) -> np.ndarray:
    """Rank of each patch by (number of nodes owned, patch index)."""
    live = owner[~failed & (owner >= 0)]
    count = np.bincount(live, minlength=int(owner.max()) + 1 if owner.size else 0)
    order = np.lexsort((np.arange(count.size), count))
    rank = np.empty(count.size, dtype=int)
    rank[order] = np.arange(count.size)
    return rank


def interface_mask(owner: np.ndarray, failed: np.ndarray) -> np.ndarray:
    """Failed nodes plus one node of every differently owned pair in a 3^n box.

    Of each such pair the node in the larger region (ties: the later patch)
    is marked, so thin regions such as boundary strips stay visible while
    large regions give up a single layer. Every conflicting pair has a marked
    member, so no difference stencil spans two patches.
    """
    nd = owner.ndim
    gamma = failed.copy()
    if not (owner >= 0).any():
        return gamma
    rank = _region_rank(owner, failed)
    key = np.where(failed | (owner < 0), -1, rank[np.maximum(owner, 0)])
    pad_owner = np.pad(owner, 1, constant_values=-1)
    pad_key = np.pad(key, 1, constant_values=-1)
    core = tuple(slice(1, -1) for _ in range(nd))
    for off in itertools.product((-1, 0, 1), repeat=nd):
        if not any(off):
            continue
        sl = tuple(slice(1 + o, s + 1 + o) for o, s in zip(off, owner.shape))
        other = pad_key[sl]
        differs = (other >= 0) & (key >= 0) & (pad_owner[sl] != owner)
        gamma |= differs & (key > other)
    return gamma


def build_cover(
    op: OperatorSpec,
    f,
    eps: float,
    grid: Grid,
    side: str = "sub",
    pins: Sequence = (),
    *,
    config: SolverConfig | None = None,
    previous: Cover | None = None,
    guide: np.ndarray | None = None,
) -> Cover:
    """Greedy row-major patch cover of ``grid`` at band width ``eps``.

    After a patch claims the unclaimed nodes of its ball, it keeps claiming
    adjacent unclaimed nodes where it still meets the band (with margin) and
    the pins, until it can grow no further. This keeps the number of small
    patches, and hence the singular set, small.

    ``pins`` are ``(point, value)`` pairs. A patch centred on a pinned node
    takes the pin as its value coefficient; a patch may only claim a pinned
    node if it matches the pin to ``pin_tolerance * eps``. ``guide`` is an
    optional array of values on the grid that claimed nodes must follow to
    within ``guide_tolerance`` times the guide's range; it is how a selection
    principle (such as vanishing viscosity) enters the cover.
    """
    cfg = config or SolverConfig()
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    band_for(side, eps)
    if grid.ndim != op.dimension:
        raise ValueError(f"grid dimension {grid.ndim} != operator dimension {op.dimension}")
    f = Field.coerce(f, op.dimension)
    n = grid.ndim
    index = _NodeIndex(grid)
    pts = grid.points()
    N = grid.size
    owner = np.full(N, -1, dtype=int)
    raw = np.full(N, np.nan)
    failed = np.zeros(N, dtype=bool)
    patches: list[LocalPatch] = []
    warnings: list[str] = []
    zero = (0,) * n
    d = cfg.degree(op)

    pin_value = np.full(N, np.nan)
    for point, value in pins:
        node = np.array(grid.nearest_node(point))
        flat = int(node @ index.strides)
        if np.max(np.abs(pts[flat] - np.asarray(point, dtype=float)) / index.h) > 1e-6:
            raise ValueError(f"pin at {tuple(point)} is not a grid node")
        pin_value[flat] = float(value)
    pin_tol = cfg.pin_tolerance * eps

    guide_flat = None
    if guide is not None:
        guide_flat = np.asarray(guide, dtype=float).reshape(-1)
        span = np.nanmax(guide_flat) - np.nanmin(guide_flat)
        guide_tol = cfg.guide_tolerance * span if span > 0 else math.inf

    margin_lo, margin_hi = band_for(side, eps, cfg.band_margin)
    lo, hi = band_for(side, eps)
    cap = cfg.radius_cap or _default_cap(None, grid.bounds)
    min_radius = min(grid.spacing)

    def node_ok(values: np.ndarray, flats: np.ndarray) -> np.ndarray:
        ok = np.isfinite(values)
        pv = pin_value[flats]
        has = np.isfinite(pv)
        ok &= ~has | (np.abs(values - np.where(has, pv, 0.0)) <= pin_tol)
        if guide_flat is not None:
            ok &= np.abs(values - guide_flat[flats]) <= guide_tol
        return ok

    def region_for(flat_center: int):
        def region_ok(poly: JetPolynomial, r: float) -> bool:
            flats, bp = index.ball(pts[flat_center], r)
            free = (owner[flats] < 0) & ~failed[flats]
            flats, bp = flats[free], bp[free]
            if flats.size == 0:
                return True
            return bool(np.all(node_ok(poly_eval(poly, bp), flats)))
        return region_ok

    def grow(j: int) -> None:
        # flood outward from patch j's nodes through unclaimed nodes it satisfies
        P = patches[j].poly
        region = (owner == j).reshape(grid.shape)
        tested = np.zeros(N, dtype=bool)
        while True:
            cand = manhattan_dilate(region, 1).ravel() & (owner < 0) & ~failed & ~tested
            idx = np.flatnonzero(cand)
            if idx.size == 0:
                return
            x = pts[idx]
            D = patch_defect(op, f, P, x)
            val = poly_eval(P, x)
            with np.errstate(invalid="ignore"):
                ok = np.isfinite(D) & (D >= margin_lo) & (D <= margin_hi) & node_ok(val, idx)
            tested[idx[~ok]] = True
            if not ok.any():
                return
            owner[idx[ok]] = j
            raw[idx[ok]] = val[ok]
            region.ravel()[idx[ok]] = True

    def seeds(flat: int) -> list[dict]:
        x0 = pts[flat]
        out = []
        if patches:
            centers = np.array([p.center for p in patches])
            radii = np.array([p.radius for p in patches])
            gap = np.linalg.norm(centers - x0, axis=1) - radii
            for j in np.argsort(gap, kind="stable")[:2]:
                out.append(dict(recenter(patches[j].poly, x0, d).coeffs))
        if previous is not None and previous.owner.flat[flat] >= 0:
            out.append(dict(recenter(previous.patches[previous.owner.flat[flat]].poly, x0, d).coeffs))
        if guide_flat is not None and math.isfinite(guide_flat[flat]):
            out.append({zero: float(guide_flat[flat])})
        out.append({})
        if math.isfinite(pin_value[flat]):
            for s in out:
                s[zero] = pin_value[flat]
        return out[: cfg.retry_budget]

    variables = _jet_vars(op)
    for flat in range(N):
        if owner[flat] >= 0 or failed[flat]:
            continue
        patch = None
        problems = []
        for seed in seeds(flat):
            for head in variables:
                try:
                    patch = _local_patch(op, f, pts[flat], eps, side, seed, cfg, grid.bounds, cap,
                                         min_radius, region_for(flat), head)
                    break
                except NoBracket as exc:
                    problems.append(str(exc))
                except (RadiusUnderflow, EvalFault) as exc:
                    problems.append(str(exc))
                    break
            if patch is not None:
                break
        if patch is None:
            failed[flat] = True
            warnings.append(f"node {flat}: no patch ({problems[-1] if problems else 'no seed'})")
            continue
        j = len(patches)
        patches.append(patch)
        flats, bp = index.ball(patch.center, patch.radius)
        free = (owner[flats] < 0) & ~failed[flats]
        flats, bp = flats[free], bp[free]
        owner[flats] = j
        raw[flats] = poly_eval(patch.poly, bp)
        # node-level audit: anything outside the exact band is demoted
        D = patch_defect(op, f, patch.poly, bp)
        bad = ~(np.isfinite(D) & (D >= lo - 1e-12) & (D <= hi + 1e-12)) | ~node_ok(raw[flats], flats)
        if bad.any():
            failed[flats[bad]] = True
            warnings.append(f"patch {j}: {int(bad.sum())} node(s) demoted by the node audit")
        grow(j)

    shape = grid.shape
    owner_g, failed_g = owner.reshape(shape), failed.reshape(shape)
    # marked nodes that a lower-ranked neighbouring patch also satisfies move
    # to that patch; this thins the singular set where patch boundaries crowd
    for _ in range(3):
        moved = 0
        rank = _region_rank(owner_g, failed_g)
        for flat in np.flatnonzero(interface_mask(owner_g, failed_g).ravel() & ~failed):
            mine = rank[owner[flat]]
            nb = index.neighbors(flat)
            lower = {int(o) for o, bad in zip(owner[nb], failed[nb]) if o >= 0 and not bad and rank[o] < mine}
            for j in sorted(lower, key=lambda j: (float(np.linalg.norm(pts[flat] - patches[j].center)), j)):
                x = pts[flat][None, :]
                D = patch_defect(op, f, patches[j].poly, x)[0]
                val = poly_eval(patches[j].poly, x)
                if math.isfinite(D) and margin_lo <= D <= margin_hi and node_ok(val, np.array([flat]))[0]:
                    owner[flat], raw[flat] = j, val[0]
                    moved += 1
                    break
        if not moved:
            break
    gamma = SingularMask(interface_mask(owner_g, failed_g))
    ok, witness = gamma.nowhere_dense()
    if not ok:
        raise CoverIncomplete(f"singular set is not nowhere dense near node {witness}", np.flatnonzero(failed))
    fn = PiecewiseFn(grid, np.where(gamma.marked, np.nan, raw.reshape(shape)), gamma, d,
                     {"epsilon": eps, "side": side})
    fn, demoted = _demote_stencil_failures(op, f, fn, eps, side, truncation_allowance(grid, f, cfg))
    if demoted:
        warnings.append(f"{demoted} node(s) demoted by the difference audit")
    gamma = fn.mask
    for w in warnings[:5]:
        log.info("%s cover eps=%g: %s", side, eps, w)
    return Cover(grid, side, eps, patches, owner_g, raw.reshape(shape), failed_g, gamma, fn, warnings)


def _demote_stencil_failures(op, f: Field, fn: PiecewiseFn, eps: float, side: str, allowance: float):
    """Move nodes whose difference-operator defect leaves the band into the mask.

    Masking a node only removes stencils, it never changes a surviving one, so
    a single pass suffices. A node is kept out of the mask when adding it would
    break nowhere-density; its failure then stays visible in the audit.
    """
    Tu = apply_operator(op, fn)
    D = Tu.values - f.on_grid(fn.grid)
    lo, hi = band_for(side, eps)
    with np.errstate(invalid="ignore"):
        bad = Tu.defined & ~((D >= lo - allowance) & (D <= hi + allowance))
    if not bad.any():
        return fn, 0
    marked = fn.mask.marked.copy()
    shape = marked.shape
    moved = 0
    for flat in np.flatnonzero(bad):
        idx = np.unravel_index(flat, shape)
        marked[idx] = True
        if _locally_dense(marked, idx):
            moved += 1
        else:
            marked[idx] = False
    mask = SingularMask(marked)
    return PiecewiseFn(fn.grid, np.where(marked, np.nan, fn.values), mask, fn.smoothness, fn.meta), moved


def _locally_dense(marked: np.ndarray, idx) -> bool:
    # every node within distance 2 of idx still sees an unmarked node within distance 2
    box = tuple(slice(max(i - 4, 0), i + 5) for i in idx)
    sub = marked[box]
    near_free = manhattan_dilate(~sub, 2)
    centre = tuple(i - b.start for i, b in zip(idx, box))
    near = np.zeros_like(sub)
    near[centre] = True
    near = manhattan_dilate(near, 2)
    return bool(np.all(near_free[near]))


def global_approx(op, f, eps, grid, side="sub", constraints=(), **kw) -> PiecewiseFn:
    """Piecewise polynomial ``U`` with ``T U`` in the ``eps`` band off its singular set."""
    return build_cover(op, f, eps, grid, side, constraints, **kw).fn


# ---------------------------------------------------------------------------
# audits


def truncation_allowance(grid: Grid, f: Field, config: SolverConfig) -> float:
    """``allow_factor * h^2 * scale`` with ``scale`` defaulting to ``max(1, max|f|)``."""
    scale = config.allow_scale
    if scale is None:
        fv = f.on_grid(grid)
        scale = max(1.0, float(np.nanmax(np.abs(fv))) if np.isfinite(fv).any() else 1.0)
    return config.allow_factor * max(grid.spacing) ** 2 * scale


def band_audit(op: OperatorSpec, f, u: PiecewiseFn, eps: float, side: str, allowance: float = 0.0) -> dict:
    """Difference-operator defect of ``u`` against the band, widened by ``allowance``.

    ``side`` is ``"sub"``, ``"super"`` or ``"both"`` (the band ``[-eps, eps]``).
    """
    f = Field.coerce(f, op.dimension)
    Tu = apply_operator(op, u)
    D = Tu.values - f.on_grid(u.grid)
    live = Tu.defined & np.isfinite(D)
    lo, hi = (-eps, eps) if side == "both" else band_for(side, eps)
    vals = D[live]
    if vals.size == 0:
        return {"min": math.nan, "max": math.nan, "pass_fraction": 0.0, "nodes": 0}
    ok = (vals >= lo - allowance) & (vals <= hi + allowance)
    return {
        "min": float(vals.min()),
        "max": float(vals.max()),
        "pass_fraction": float(ok.mean()),
        "nodes": int(vals.size),
    }


# ---------------------------------------------------------------------------
# the cut


@dataclass
class Level:
    side: str
    epsilon: float
    fn: PiecewiseFn
    gamma_fraction: float
    defect: dict
    patches: int
    warnings: int = 0

    def to_json(self) -> dict:
        return {
            "side": self.side,
            "epsilon": self.epsilon,
            "fn": self.fn.to_json(),
            "gamma_fraction": self.gamma_fraction,
            "defect": self.defect,
            "patches": self.patches,
            "warnings": self.warnings,
        }


@dataclass
class CutSolution:
    epsilons: list[float]
    subs: list[PiecewiseFn]
    supers: list[PiecewiseFn]
    lower: IntervalFn | None
    upper: IntervalFn | None
    image_defect: float
    levels: list[Level]
    allowance: float
    image_lower: IntervalFn | None = None
    image_upper: IntervalFn | None = None
    covers: list[Cover] = dc_field(default_factory=list, repr=False)
    failures: list[str] = dc_field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.failures

    def to_json(self) -> dict:
        out = {
            "epsilons": list(self.epsilons),
            "levels": [lv.to_json() for lv in self.levels],
            "lower": self.lower.to_json() if self.lower is not None else None,
            "upper": self.upper.to_json() if self.upper is not None else None,
            "image_defect": self.image_defect,
            "allowance": self.allowance,
            "failures": list(self.failures),
        }
        if self.image_lower is not None:
            out["image_lower"] = self.image_lower.to_json()
            out["image_upper"] = self.image_upper.to_json()
        return out


def refine_cut(
    op: OperatorSpec,
    f,
    grid: Grid,
    eps0: float,
    K: int,
    constraints: Sequence = (),
    *,
    config: SolverConfig | None = None,
    guide: np.ndarray | None = None,
) -> CutSolution:
    """Covers at ``eps0 / 2**k`` for ``k = 0..K`` on both sides, and their envelopes.

    ``lower``/``upper`` are the graph-completed supremum of the sub family and
    infimum of the super family in value space. ``image_lower``/``image_upper``
    are the same envelopes of the difference-operator images, which bracket
    ``f`` for every operator. A level that fails stops the refinement; what
    was built so far is returned with the failure recorded.
    """
    if K < 1:
        raise ValueError("need K >= 1")
    if not eps0 > 0:
        raise ValueError("eps0 must be positive")
    cfg = config or SolverConfig()
    f = Field.coerce(f, op.dimension)
    allowance = truncation_allowance(grid, f, cfg)
    eps_list = [eps0 / 2**k for k in range(K + 1)]
    fam = {"sub": [], "super": []}
    prev = {"sub": None, "super": None}
    levels, covers, failures = [], [], []
    done = []
    for k, eps in enumerate(eps_list):
        for side in SIDES:
            try:
                cov = build_cover(op, f, eps, grid, side, constraints, config=cfg, previous=prev[side], guide=guide)
            except SolverError as exc:
                failures.append(f"level {k} ({side}, eps={eps:g}): {exc}")
                break
            prev[side] = cov
            fam[side].append(cov.fn)
            covers.append(cov)
            levels.append(Level(side, eps, cov.fn, cov.gamma_fraction,
                                band_audit(op, f, cov.fn, eps, side, allowance),
                                len(cov.patches), len(cov.warnings)))
        if failures:
            break
        done.append(eps)

    lower = sup_family(fam["sub"]) if fam["sub"] else None
    upper = inf_family(fam["super"]) if fam["super"] else None
    images = {s: [apply_operator(op, u) for u in fam[s]] for s in SIDES}
    image_lower = sup_family(images["sub"]) if images["sub"] else None
    image_upper = inf_family(images["super"]) if images["super"] else None

    image_defect = math.nan
    fv = f.on_grid(grid)
    finest = [lv for lv in levels if lv.epsilon == min(lv.epsilon for lv in levels)] if levels else []
    worst = []
    for lv in finest:
        Tu = apply_operator(op, lv.fn)
        D = np.abs(Tu.values - fv)[Tu.defined]
        D = D[np.isfinite(D)]
        if D.size:
            worst.append(float(D.max()))
    if worst:
        image_defect = max(worst)
    return CutSolution(done, fam["sub"], fam["super"], lower, upper, image_defect, levels, allowance,
                       image_lower, image_upper, covers, failures)


# ---------------------------------------------------------------------------
# vanishing-viscosity guide for evolution problems


def viscous_guide(op: OperatorSpec, f, grid: Grid, pins: Sequence, visc_factor: float = 1.0, cfl: float = 0.4) -> np.ndarray:
    """March ``F(x, u, u_t, grad u, ...) = f`` in axis 0 with added viscosity.

    The operator must be first order in axis 0 and affine in ``u_t``. The
    initial row comes from the pins on the first axis-0 grid line. Spatial
    derivatives use central differences with edge extension; the viscosity is
    ``visc_factor`` times the largest characteristic speed times the spacing,
    so the guide converges to the entropy solution as the grid is refined.
    """
    f = Field.coerce(f, op.dimension)
    n = grid.ndim
    t_axis = (1,) + (0,) * (n - 1)
    variables = _jet_vars(op)
    if t_axis not in variables or any(p[0] > 0 and p != t_axis for p in variables):
        raise ValueError("guide needs an operator that is first order in its first coordinate")
    spatial = [p for p in variables if p[0] == 0]
    shape = grid.shape
    axes = grid.axes()
    hs = grid.spacing[1:]
    index = _NodeIndex(grid)
    row = np.full(shape[1:], np.nan)
    for point, value in pins:
        node = grid.nearest_node(point)
        if node[0] == 0:
            row[node[1:]] = value
    if np.isnan(row).any():
        raise ValueError("guide needs a pin at every node of the initial line")
    space_mesh = list(np.meshgrid(*axes[1:], indexing="ij"))

    def derivs(u):
        out = {}
        for p in spatial:
            q = p[1:]
            if not any(q):
                out[p] = u
                continue
            r = max((k + 1) // 2 for k in q)
            padded = np.pad(u, r, mode="edge")
            dq = difference(padded, q, hs)
            out[p] = dq[tuple(slice(r, -r) for _ in q)]
        return out

    def F_of(t, u, jets, tau):
        jets = dict(jets)
        jets[t_axis] = np.full(u.shape, tau) if np.isscalar(tau) else tau
        coords = [np.full(u.shape, t)] + space_mesh
        with np.errstate(all="ignore"):
            return np.broadcast_to(evaluate(op.lhs, coords, jets), u.shape)

    def rate(t, u):
        jets = derivs(u)
        fv = f.values(np.stack([np.full(u.size, t)] + [m.ravel() for m in space_mesh], axis=1)).reshape(u.shape)
        F0, F1, F2 = F_of(t, u, jets, 0.0), F_of(t, u, jets, 1.0), F_of(t, u, jets, 2.0)
        slope = F1 - F0
        if not np.allclose(F2 - F1, slope, rtol=1e-9, atol=1e-12) or np.any(slope == 0):
            raise ValueError("guide needs an operator affine in its time derivative")
        tau = (fv - F0) / slope
        speeds = []
        for p in spatial:
            if sum(p) == 1:
                hstep = 1e-6
                up, dn = dict(jets), dict(jets)
                up[p], dn[p] = jets[p] + hstep, jets[p] - hstep
                dF = (F_of(t, u, up, tau) - F_of(t, u, dn, tau)) / (2 * hstep)
                speeds.append(np.abs(dF / slope))
        speed = max((float(np.max(s)) for s in speeds), default=0.0)
        return tau, speed

    out = np.empty(shape)
    out[0] = row
    u = row.astype(float)
    ht = grid.spacing[0]
    hmin = min(hs)
    for i in range(1, shape[0]):
        t = axes[0][i - 1]
        remaining = ht
        while remaining > 1e-15:
            tau, speed = rate(t, u)
            nu = visc_factor * speed * hmin
            limits = [remaining]
            if speed > 0:
                limits.append(cfl * hmin / speed)
            if nu > 0:
                limits.append(cfl * hmin**2 / (2 * nu * (n - 1)))
            dt = min(limits)
            lap = sum(_second_difference(u, a, hs[a]) for a in range(n - 1)) if nu > 0 else 0.0
            u = u + dt * (tau + nu * lap)
            t += dt
            remaining -= dt
        out[i] = u
    return out


def _second_difference(u: np.ndarray, axis: int, h: float) -> np.ndarray:
    padded = np.pad(u, [(1, 1) if a == axis else (0, 0) for a in range(u.ndim)], mode="edge")
    n = u.shape[axis]
    sl = lambda a, b: tuple(slice(a, b) if ax == axis else slice(None) for ax in range(u.ndim))
    return (padded[sl(0, n)] - 2 * padded[sl(1, n + 1)] + padded[sl(2, n + 2)]) / h**2
