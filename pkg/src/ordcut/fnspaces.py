"""Grid functions that are smooth off a closed nowhere-dense singular set.

A :class:`PiecewiseFn` carries values on every grid node outside its
:class:`SingularMask`; masked nodes hold ``nan``. Two orders are provided:
the natural pointwise order compared off both masks, and the pullback order
``u <=_T v  iff  T u <= T v`` induced by an operator ``T``.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expr import OperatorSpec, evaluate

log = logging.getLogger(__name__)

# central second-order difference weights, offsets -r..r, before dividing by h^k
_STENCILS = {
    0: np.array([1.0]),
    1: np.array([-0.5, 0.0, 0.5]),
    2: np.array([1.0, -2.0, 1.0]),
    3: np.array([-0.5, 1.0, 0.0, -1.0, 0.5]),
    4: np.array([1.0, -4.0, 6.0, -4.0, 1.0]),
}


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on an axis-aligned box, nodes in row-major order."""

    bounds: tuple[tuple[float, float], ...]
    resolution: tuple[int, ...]

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        res = tuple(int(r) for r in self.resolution)
        if len(bounds) != len(res) or not res:
            raise GridError("bounds and resolution must have the same, nonzero length")
        for (lo, hi), r in zip(bounds, res):
            if r < 3:
                raise GridError(f"resolution {r} < 3 on some axis")
            if not hi > lo:
                raise GridError(f"empty axis [{lo}, {hi}]")
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "resolution", res)

    @property
    def ndim(self) -> int:
        return len(self.resolution)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.resolution

    @property
    def size(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (r - 1) for (lo, hi), r in zip(self.bounds, self.resolution))

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, r) for (lo, hi), r in zip(self.bounds, self.resolution)]

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*self.axes(), indexing="ij")

    def points(self) -> np.ndarray:
        """All node coordinates, shape ``(size, ndim)``, row-major."""
        return np.stack([m.ravel() for m in self.mesh()], axis=1)

    def point(self, index) -> np.ndarray:
        idx = np.unravel_index(index, self.shape) if np.isscalar(index) else tuple(index)
        return np.array([lo + i * h for (lo, _), i, h in zip(self.bounds, idx, self.spacing)])

    def nearest_node(self, x: Sequence[float]) -> tuple[int, ...]:
        idx = []
        for xi, (lo, hi), r, h in zip(x, self.bounds, self.resolution, self.spacing):
            idx.append(int(np.clip(round((xi - lo) / h), 0, r - 1)))
        return tuple(idx)

    def refined(self) -> "Grid":
        """Same box with the spacing halved on every axis."""
        return Grid(self.bounds, tuple(2 * r - 1 for r in self.resolution))

    def to_json(self) -> dict:
        return {"bounds": [list(b) for b in self.bounds], "resolution": list(self.resolution)}


def box_dilate(marked: np.ndarray, radii: Sequence[int]) -> np.ndarray:
    """Nodes within per-axis index distance ``radii`` of a marked node."""
    out = marked.copy()
    for axis, r in enumerate(radii):
        cur = out.copy()
        for s in range(1, r + 1):
            cur[_slab(axis, s, None, out.ndim)] |= out[_slab(axis, 0, -s, out.ndim)]
            cur[_slab(axis, 0, -s, out.ndim)] |= out[_slab(axis, s, None, out.ndim)]
        out = cur
    return out


def _slab(axis, start, stop, ndim):
    sl = [slice(None)] * ndim
    sl[axis] = slice(start, stop)
    return tuple(sl)


def manhattan_dilate(marked: np.ndarray, radius: int) -> np.ndarray:
    out = marked.copy()
    for _ in range(radius):
        cur = out.copy()
        for axis in range(out.ndim):
            cur[_slab(axis, 1, None, out.ndim)] |= out[_slab(axis, 0, -1, out.ndim)]
            cur[_slab(axis, 0, -1, out.ndim)] |= out[_slab(axis, 1, None, out.ndim)]
        out = cur
    return out


@dataclass(frozen=True, eq=False)
class SingularMask:
    """The discrete singular set: a boolean array over the grid nodes."""

    marked: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "marked", np.asarray(self.marked, dtype=bool))

    @classmethod
    def empty(cls, shape) -> "SingularMask":
        return cls(np.zeros(shape, dtype=bool))

    @property
    def count(self) -> int:
        return int(self.marked.sum())

    @property
    def fraction(self) -> float:
        return self.count / self.marked.size

    def indices(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.marked)]

    def nowhere_dense(self) -> tuple[bool, int | None]:
        """Every node must have an unmarked node within grid-graph distance 2.

        Returns ``(ok, witness)`` with the first failing node in row-major order.
        """
        near_free = manhattan_dilate(~self.marked, 2)
        bad = np.flatnonzero(~near_free)
        return (bad.size == 0, int(bad[0]) if bad.size else None)

    def __eq__(self, other):
        return isinstance(other, SingularMask) and np.array_equal(self.marked, other.marked)


@dataclass(frozen=True, eq=False)
class PiecewiseFn:
    """Grid function defined off a singular mask (``nan`` on masked nodes)."""

    grid: Grid
    values: np.ndarray
    mask: SingularMask
    smoothness: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(self.grid.shape)
        if self.mask.marked.shape != self.grid.shape:
            raise GridError("mask shape does not match grid")
        vals[self.mask.marked] = np.nan
        if np.isnan(vals[~self.mask.marked]).any():
            raise ValueError("values missing on unmarked nodes")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def sample(cls, grid: Grid, func: Callable, mask: SingularMask | None = None, smoothness: int = 99) -> "PiecewiseFn":
        """Sample ``func(*coordinate_arrays)`` on the grid."""
        vals = np.broadcast_to(np.asarray(func(*grid.mesh()), dtype=float), grid.shape).copy()
        mask = mask or SingularMask.empty(grid.shape)
        marked = mask.marked | ~np.isfinite(vals)
        return cls(grid, vals, SingularMask(marked), smoothness)

    @property
    def defined(self) -> np.ndarray:
        return ~self.mask.marked

    def to_json(self) -> dict:
        flat = self.values.ravel()
        out = self.grid.to_json()
        out["values"] = [None if np.isnan(v) else float(v) for v in flat]
        out["mask"] = self.mask.indices()
        out["smoothness"] = self.smoothness
        out.update({k: v for k, v in self.meta.items() if k not in out})
        return out

    @classmethod
    def from_json(cls, data: dict) -> "PiecewiseFn":
        grid = Grid(tuple(tuple(b) for b in data["bounds"]), tuple(data["resolution"]))
        vals = np.array([np.nan if v is None else v for v in data["values"]], dtype=float)
        if vals.size != grid.size:
            raise ValueError("values length does not match grid")
        marked = np.zeros(grid.size, dtype=bool)
        marked[np.asarray(data.get("mask", []), dtype=int)] = True
        marked |= np.isnan(vals)
        meta = {k: data[k] for k in ("epsilon", "side", "level") if k in data}
        return cls(grid, vals, SingularMask(marked.reshape(grid.shape)), int(data.get("smoothness", 0)), meta)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(self.grid.ndim)] + ["value", "masked"])
        for p, v, m in zip(self.grid.points(), self.values.ravel(), self.mask.marked.ravel()):
            w.writerow([repr(float(c)) for c in p] + ["NaN" if m else repr(float(v)), int(m)])
        return buf.getvalue()


def _check_same_grid(u: PiecewiseFn, v: PiecewiseFn):
    if u.grid != v.grid:
        raise GridError("functions live on different grids")


def natural_leq(u: PiecewiseFn, v: PiecewiseFn) -> bool:
    """``u <= v`` at every node where both are defined."""
    _check_same_grid(u, v)
    both = u.defined & v.defined
    return bool(np.all(u.values[both] <= v.values[both]))


def stencil_radii(op: OperatorSpec) -> tuple[int, ...]:
    """Per-axis index radius of the difference stencils ``op`` needs."""
    radii = [0] * op.dimension
    for node in op.lhs.walk():
        if node.kind == "jet":
            for axis, k in enumerate(node.value):
                radii[axis] = max(radii[axis], (k + 1) // 2)
    return tuple(radii)


def difference(values: np.ndarray, p: Sequence[int], spacing: Sequence[float]) -> np.ndarray:
    """Central second-order approximation of ``D^p`` on the full array.

    Entries whose stencil leaves the array are ``nan``.
    """
    out = np.asarray(values, dtype=float)
    for axis, k in enumerate(p):
        if k == 0:
            continue
        if k not in _STENCILS:
            raise GridError(f"derivative order {k} has no stencil")
        w = _STENCILS[k]
        r = (len(w) - 1) // 2
        n = out.shape[axis]
        if 2 * r >= n:
            raise GridError(f"stencil radius {r} exceeds grid along axis {axis}")
        acc = np.full(out.shape, np.nan)
        inner = np.zeros(out.shape[:axis] + (n - 2 * r,) + out.shape[axis + 1:])
        for j, wj in enumerate(w):
            if wj:
                inner = inner + wj * out[_slab(axis, j, n - 2 * r + j, out.ndim)]
        acc[_slab(axis, r, n - r, out.ndim)] = inner / spacing[axis] ** k
        out = acc
    return out


def collar(grid: Grid, radii: Sequence[int]) -> np.ndarray:
    c = np.zeros(grid.shape, dtype=bool)
    for axis, r in enumerate(radii):
        if r:
            c[_slab(axis, 0, r, grid.ndim)] = True
            c[_slab(axis, grid.shape[axis] - r, None, grid.ndim)] = True
    return c


def apply_operator(op: OperatorSpec, u: PiecewiseFn) -> PiecewiseFn:
    """``T u`` by central differences, defined where the full stencil is clean.

    The result mask is ``u``'s mask dilated by the stencil radius, plus the
    boundary collar, plus any node where ``F`` faults.
    """
    if u.grid.ndim != op.dimension:
        raise GridError(f"grid dimension {u.grid.ndim} != operator dimension {op.dimension}")
    if u.smoothness < op.order:
        raise ValueError(f"function smoothness {u.smoothness} below operator order {op.order}")
    grid = u.grid
    radii = stencil_radii(op)
    jets = {}
    for node in op.lhs.walk():
        if node.kind == "jet" and node.value not in jets:
            jets[node.value] = difference(u.values, node.value, grid.spacing)
    with np.errstate(all="ignore"):
        val = np.broadcast_to(evaluate(op.lhs, grid.mesh(), jets), grid.shape).astype(float)
    structural = box_dilate(u.mask.marked, radii) | collar(grid, radii)
    faults = ~structural & ~np.isfinite(val)
    if faults.any():
        log.warning("evaluation fault at %d node(s), first %d", faults.sum(), np.flatnonzero(faults)[0])
    marked = structural | faults
    return PiecewiseFn(grid, np.where(marked, np.nan, val), SingularMask(marked), 0)


def pullback_leq(op: OperatorSpec, u: PiecewiseFn, v: PiecewiseFn) -> bool:
    """The operator-induced preorder: ``natural_leq(T u, T v)``."""
    _check_same_grid(u, v)
    return natural_leq(apply_operator(op, u), apply_operator(op, v))
