"""Interval-valued grid functions and their graph completion.

An :class:`IntervalFn` assigns a closed, possibly unbounded interval to every
grid node. Real-valued data embeds as degenerate intervals. Graph completion
fills in the vertical segment at each discrete jump so that the result is
determined by its real values on a dense set of nodes.

What counts as a jump on a grid is a modelling choice. Here an axis edge
``(x - e_a, x)`` is a jump when the two intervals are separated by a gap larger
than

    theta_a = min(jump_slope * h_a * scale, jump_fraction * osc)

where ``scale = max(1, largest finite endpoint magnitude)`` and ``osc`` is the
finite range of the data. Smooth samples have edge differences of order
``h_a`` and are left alone; a step of size comparable to the data range is
always a jump. The segment is attached to the node on the positive side of the
edge, so a sampled step function is widened at exactly one node. Both
quantities are unchanged by completion, which makes completion idempotent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fnspaces import Grid, PiecewiseFn, _slab, manhattan_dilate

JUMP_SLOPE = 25.0
JUMP_FRACTION = 0.25


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if math.isnan(self.lo) or math.isnan(self.hi) or self.lo > self.hi:
            raise ValueError(f"invalid interval [{self.lo}, {self.hi}]")

    @property
    def degenerate(self) -> bool:
        return self.lo == self.hi


@dataclass(frozen=True, eq=False)
class IntervalFn:
    grid: Grid
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lo, dtype=float).reshape(self.grid.shape)
        hi = np.array(self.hi, dtype=float).reshape(self.grid.shape)
        if np.isnan(lo).any() or np.isnan(hi).any():
            raise ValueError("interval endpoints must not be nan")
        if (lo > hi).any():
            bad = int(np.flatnonzero(lo > hi)[0])
            raise ValueError(f"lo > hi at node {bad}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_values(cls, grid: Grid, values) -> "IntervalFn":
        v = np.asarray(values, dtype=float)
        return cls(grid, v, v)

    @classmethod
    def embed(cls, u: PiecewiseFn) -> "IntervalFn":
        """Degenerate intervals off the mask, ``[-inf, inf]`` on it."""
        lo = np.where(u.mask.marked, -np.inf, u.values)
        hi = np.where(u.mask.marked, np.inf, u.values)
        return cls(u.grid, lo, hi)

    def cell(self, index: int) -> Interval:
        return Interval(float(self.lo.flat[index]), float(self.hi.flat[index]))

    @property
    def cells(self) -> list[Interval]:
        return [Interval(float(a), float(b)) for a, b in zip(self.lo.ravel(), self.hi.ravel())]

    @property
    def degenerate(self) -> np.ndarray:
        return self.lo == self.hi

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def __eq__(self, other):
        return (
            isinstance(other, IntervalFn)
            and self.grid == other.grid
            and np.array_equal(self.lo, other.lo)
            and np.array_equal(self.hi, other.hi)
        )

    def to_json(self) -> dict:
        out = self.grid.to_json()
        out["cells"] = [{"lo": _enc(a), "hi": _enc(b)} for a, b in zip(self.lo.ravel(), self.hi.ravel())]
        return out

    @classmethod
    def from_json(cls, data: dict, grid: Grid | None = None) -> "IntervalFn":
        if grid is None:
            grid = Grid(tuple(tuple(b) for b in data["bounds"]), tuple(data["resolution"]))
        cells = data["cells"]
        if len(cells) != grid.size:
            raise ValueError("cell count does not match grid")
        lo = [_dec(c["lo"]) for c in cells]
        hi = [_dec(c["hi"]) for c in cells]
        return cls(grid, lo, hi)


def _enc(v: float):
    if v == math.inf:
        return "inf"
    if v == -math.inf:
        return "-inf"
    return float(v)


def _dec(v) -> float:
    if isinstance(v, str):
        if v in ("inf", "-inf"):
            return float(v)
        raise ValueError(f"bad interval endpoint {v!r}")
    return float(v)


def jump_thresholds(f: IntervalFn, jump_slope: float = JUMP_SLOPE, jump_fraction: float = JUMP_FRACTION) -> list[float]:
    finite_lo = f.lo[np.isfinite(f.lo)]
    finite_hi = f.hi[np.isfinite(f.hi)]
    if finite_lo.size == 0 and finite_hi.size == 0:
        return [0.0] * f.grid.ndim
    bottom = finite_lo.min() if finite_lo.size else finite_hi.min()
    top = finite_hi.max() if finite_hi.size else finite_lo.max()
    scale = max(1.0, abs(bottom), abs(top))
    osc = top - bottom
    return [min(jump_slope * h * scale, jump_fraction * osc) for h in f.grid.spacing]


def lower_envelope(f: IntervalFn, **kw) -> IntervalFn:
    """Extend ``lo`` down across every upward jump entering a node."""
    theta = jump_thresholds(f, **kw)
    lo = f.lo.copy()
    nd = f.grid.ndim
    with np.errstate(invalid="ignore"):
        for axis in range(nd):
            cur, prev = _slab(axis, 1, None, nd), _slab(axis, 0, -1, nd)
            jump = f.hi[prev] < f.lo[cur] - theta[axis]
            lo[cur] = np.where(jump, np.minimum(lo[cur], f.lo[prev]), lo[cur])
    return IntervalFn(f.grid, lo, f.hi)


def upper_envelope(f: IntervalFn, **kw) -> IntervalFn:
    """Extend ``hi`` up across every downward jump entering a node."""
    theta = jump_thresholds(f, **kw)
    hi = f.hi.copy()
    nd = f.grid.ndim
    with np.errstate(invalid="ignore"):
        for axis in range(nd):
            cur, prev = _slab(axis, 1, None, nd), _slab(axis, 0, -1, nd)
            jump = f.lo[prev] > f.hi[cur] + theta[axis]
            hi[cur] = np.where(jump, np.maximum(hi[cur], f.hi[prev]), hi[cur])
    return IntervalFn(f.grid, f.lo, hi)


def _complete_once(f: IntervalFn, **kw) -> IntervalFn:
    return IntervalFn(f.grid, lower_envelope(f, **kw).lo, upper_envelope(f, **kw).hi)


def graph_complete(f: IntervalFn, **kw) -> IntervalFn:
    """Both envelopes at once, repeated to a fixpoint."""
    cur = f
    for _ in range(2):
        nxt = _complete_once(cur, **kw)
        if nxt == cur:
            return cur
        cur = nxt
    assert _complete_once(cur, **kw) == cur, "graph completion did not settle"
    return cur


def is_hcontinuous(f: IntervalFn, **kw) -> tuple[bool, int | None]:
    """Degenerate nodes within graph distance 2 of every node, and completion-fixed."""
    near = manhattan_dilate(f.degenerate, 2)
    if not near.all():
        return False, int(np.flatnonzero(~near)[0])
    g = _complete_once(f, **kw)
    changed = (g.lo != f.lo) | (g.hi != f.hi)
    if changed.any():
        return False, int(np.flatnonzero(changed)[0])
    return True, None


def _family_values(fs: Sequence[PiecewiseFn]) -> tuple[Grid, np.ndarray]:
    if not fs:
        raise ValueError("empty family")
    grid = fs[0].grid
    if any(u.grid != grid for u in fs):
        raise ValueError("family members live on different grids")
    return grid, np.stack([u.values for u in fs])


def sup_family(fs: Sequence[PiecewiseFn], complete: bool = True, **kw) -> IntervalFn:
    """Nodewise max over members defined at each node, then graph-completed.

    Nodes masked in every member get ``[-inf, inf]``. With ``complete=False``
    the raw degenerate supremum is returned.
    """
    grid, vals = _family_values(fs)
    none = np.isnan(vals).all(axis=0)
    with np.errstate(all="ignore"):
        top = np.where(none, 0.0, np.nanmax(np.where(np.isnan(vals), -np.inf, vals), axis=0))
    f = IntervalFn(grid, np.where(none, -np.inf, top), np.where(none, np.inf, top))
    return graph_complete(f, **kw) if complete else f


def inf_family(fs: Sequence[PiecewiseFn], complete: bool = True, **kw) -> IntervalFn:
    grid, vals = _family_values(fs)
    none = np.isnan(vals).all(axis=0)
    bottom = np.where(none, 0.0, np.where(np.isnan(vals), np.inf, vals).min(axis=0))
    f = IntervalFn(grid, np.where(none, -np.inf, bottom), np.where(none, np.inf, bottom))
    return graph_complete(f, **kw) if complete else f
