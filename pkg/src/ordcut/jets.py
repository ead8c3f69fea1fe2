"""Local Taylor polynomials stored by their jets.

A :class:`JetPolynomial` of order ``m`` centred at ``c`` is

    P(x) = sum_{|p| <= m} a_p (x - c)^p / p!

so that ``D^p P(c) == a_p`` exactly. Storing the jet rather than monomial
coefficients lets a solver perturb a single derivative value directly.

:class:`TaylorSeries` is truncated multivariate power-series arithmetic (with
normalised coefficients ``a_p / p!``). It is used to compute the Taylor
expansion of an operator applied to a polynomial without symbolic
differentiation.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

MultiIndex = tuple[int, ...]


@lru_cache(maxsize=None)
def multi_indices(n: int, m: int) -> tuple[MultiIndex, ...]:
    """All ``p`` in N^n with ``|p| <= m``, by degree then lexicographically."""
    if n < 1 or m < 0:
        raise ValueError("need n >= 1 and m >= 0")
    out = []
    for d in range(m + 1):
        out.extend(sorted(p for p in itertools.product(range(d + 1), repeat=n) if sum(p) == d))
    return tuple(out)


def mi_factorial(p: Sequence[int]) -> int:
    return math.prod(math.factorial(k) for k in p)


@dataclass(frozen=True)
class JetPolynomial:
    center: tuple[float, ...]
    order: int
    coeffs: Mapping[MultiIndex, float]

    def __post_init__(self):
        n = len(self.center)
        if n < 1:
            raise ValueError("center must have at least one coordinate")
        clean = {}
        for p, a in self.coeffs.items():
            p = tuple(int(k) for k in p)
            if len(p) != n or min(p) < 0:
                raise ValueError(f"bad multi-index {p} for dimension {n}")
            if sum(p) > self.order:
                raise ValueError(f"multi-index {p} exceeds order {self.order}")
            clean[p] = float(a)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "coeffs", clean)

    @property
    def dimension(self) -> int:
        return len(self.center)

    def coeff(self, p: MultiIndex) -> float:
        return self.coeffs.get(tuple(p), 0.0)

    def with_coeff(self, p: MultiIndex, value: float) -> "JetPolynomial":
        coeffs = dict(self.coeffs)
        coeffs[tuple(p)] = float(value)
        return JetPolynomial(self.center, self.order, coeffs)

    def __call__(self, x):
        return poly_eval(self, x)


def _offsets(P: JetPolynomial, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    scalar = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != P.dimension:
        raise ValueError(f"point dimension {arr.shape[-1]} != polynomial dimension {P.dimension}")
    return arr - np.asarray(P.center), scalar


def _scaled_powers(X: np.ndarray, top: int) -> np.ndarray:
    # pw[i, e] = X_i**e / e!, shape (n, top + 1, k)
    pw = np.empty((X.shape[1], top + 1, X.shape[0]))
    pw[:, 0] = 1.0
    for e in range(1, top + 1):
        pw[:, e] = pw[:, e - 1] * X.T / e
    return pw


def _term_arrays(P: JetPolynomial) -> tuple[np.ndarray, np.ndarray]:
    cached = P.__dict__.get("_terms")
    if cached is None:
        items = [(q, a) for q, a in P.coeffs.items() if a != 0.0]
        Q = np.array([q for q, _ in items], dtype=int).reshape(len(items), P.dimension)
        A = np.array([a for _, a in items], dtype=float)
        cached = (Q, A)
        object.__setattr__(P, "_terms", cached)
    return cached


def _derivative_from_powers(P: JetPolynomial, p: tuple[int, ...], pw: np.ndarray) -> np.ndarray:
    Q, A = _term_arrays(P)
    keep = np.all(Q >= np.array(p), axis=1)
    if not keep.any():
        return np.zeros(pw.shape[2])
    R = Q[keep] - np.array(p)
    vals = pw[0, R[:, 0]]
    for i in range(1, pw.shape[0]):
        vals = vals * pw[i, R[:, i]]
    return A[keep] @ vals


def poly_derivative_at(P: JetPolynomial, p: Sequence[int], x):
    """``D^p P(x)``, exact; ``x`` may be one point or an array of points."""
    p = tuple(int(k) for k in p)
    X, scalar = _offsets(P, x)
    out = _derivative_from_powers(P, p, _scaled_powers(X, P.order))
    return float(out[0]) if scalar else out


def poly_derivatives_at(P: JetPolynomial, ps: Sequence[Sequence[int]], x) -> dict:
    """``{p: D^p P(x)}`` for several ``p``, sharing the power table."""
    X, scalar = _offsets(P, x)
    pw = _scaled_powers(X, P.order)
    out = {}
    for p in ps:
        p = tuple(int(k) for k in p)
        v = _derivative_from_powers(P, p, pw)
        out[p] = float(v[0]) if scalar else v
    return out


def poly_eval(P: JetPolynomial, x):
    """``P(x)``; at the center this is the constant coefficient."""
    return poly_derivative_at(P, (0,) * P.dimension, x)


def jet_of(P: JetPolynomial, x, order: int | None = None) -> dict[MultiIndex, float]:
    """All derivatives ``D^p P(x)`` with ``|p| <= order`` (default ``P.order``)."""
    m = P.order if order is None else order
    return poly_derivatives_at(P, multi_indices(P.dimension, m), x)


def recenter(P: JetPolynomial, center: Sequence[float], order: int | None = None) -> JetPolynomial:
    """The same polynomial re-expanded around ``center``."""
    m = P.order if order is None else order
    center = tuple(float(c) for c in center)
    return JetPolynomial(center, m, jet_of(P, center, m))


def to_json(P: JetPolynomial) -> dict:
    return {
        "center": list(P.center),
        "order": P.order,
        "coeffs": [{"p": list(p), "a": a} for p, a in sorted(P.coeffs.items(), key=lambda kv: (sum(kv[0]), kv[0]))],
    }


def from_json(data: Mapping) -> JetPolynomial:
    return JetPolynomial(
        tuple(data["center"]),
        int(data["order"]),
        {tuple(c["p"]): float(c["a"]) for c in data["coeffs"]},
    )


# ---------------------------------------------------------------------------
# truncated multivariate power series


@lru_cache(maxsize=None)
def _degree_mask(n: int, d: int) -> np.ndarray:
    grids = np.indices((d + 1,) * n)
    return grids.sum(axis=0) <= d


class TaylorSeries:
    """Truncated power series in ``n`` variables, total degree ``<= d``.

    ``arr[p]`` holds the normalised coefficient ``D^p g(x0) / p!``.
    """

    __slots__ = ("arr", "d")

    def __init__(self, arr: np.ndarray, d: int):
        self.arr = arr
        self.d = d

    @classmethod
    def constant(cls, c: float, n: int, d: int) -> "TaylorSeries":
        arr = np.zeros((d + 1,) * n)
        arr[(0,) * n] = c
        return cls(arr, d)

    @classmethod
    def variable(cls, axis: int, c: float, n: int, d: int) -> "TaylorSeries":
        s = cls.constant(c, n, d)
        if d >= 1:
            idx = [0] * n
            idx[axis] = 1
            s.arr[tuple(idx)] = 1.0
        return s

    @property
    def n(self) -> int:
        return self.arr.ndim

    @property
    def c0(self) -> float:
        return float(self.arr[(0,) * self.n])

    def coeff(self, p: MultiIndex) -> float:
        return float(self.arr[tuple(p)])

    def _lift(self, other) -> "TaylorSeries":
        if isinstance(other, TaylorSeries):
            return other
        return TaylorSeries.constant(float(other), self.n, self.d)

    def __add__(self, other):
        return TaylorSeries(self.arr + self._lift(other).arr, self.d)

    def __sub__(self, other):
        return TaylorSeries(self.arr - self._lift(other).arr, self.d)

    def __neg__(self):
        return TaylorSeries(-self.arr, self.d)

    def scale(self, k: float) -> "TaylorSeries":
        return TaylorSeries(self.arr * k, self.d)

    def __mul__(self, other):
        other = self._lift(other)
        a, b, d, n = self.arr, other.arr, self.d, self.n
        out = np.zeros_like(a)
        size = d + 1
        with np.errstate(all="ignore"):
            for p in zip(*np.nonzero(a)):
                if sum(p) > d:
                    continue
                dst = tuple(slice(pi, size) for pi in p)
                src = tuple(slice(0, size - pi) for pi in p)
                out[dst] += a[p] * b[src]
        out[~_degree_mask(n, d)] = 0.0
        return TaylorSeries(out, d)

    def _compose(self, derivs: Sequence[float]) -> "TaylorSeries":
        # g(c0 + h) = sum_k g^(k)(c0) / k! h^k with h nilpotent past degree d
        h = TaylorSeries(self.arr.copy(), self.d)
        h.arr[(0,) * self.n] = 0.0
        out = TaylorSeries.constant(derivs[0], self.n, self.d)
        power = None
        for k in range(1, self.d + 1):
            power = h if power is None else power * h
            if derivs[k] != 0.0:
                out = out + power.scale(derivs[k] / math.factorial(k))
        return out

    def _nan(self) -> "TaylorSeries":
        return TaylorSeries(np.full_like(self.arr, np.nan), self.d)

    def power(self, r: Fraction) -> "TaylorSeries":
        if r.denominator == 1 and r >= 0:
            out = TaylorSeries.constant(1.0, self.n, self.d)
            base, k = self, r.numerator
            while k:
                if k & 1:
                    out = out * base
                k >>= 1
                if k:
                    base = base * base
            return out
        c = self.c0
        if c == 0 or (c < 0 and r.denominator != 1) or not math.isfinite(c):
            return self._nan()
        rf = float(r)
        derivs = []
        coef = 1.0
        for k in range(self.d + 1):
            derivs.append(coef * c ** (rf - k))
            coef *= rf - k
        return self._compose(derivs)

    def __truediv__(self, other):
        return self * self._lift(other).power(Fraction(-1))

    def func(self, name: str) -> "TaylorSeries":
        c = self.c0
        if not math.isfinite(c):
            return self._nan()
        d = self.d
        if name == "exp":
            e = math.exp(c) if c < 700 else math.inf
            return self._compose([e] * (d + 1))
        if name == "log":
            if c <= 0:
                return self._nan()
            derivs = [math.log(c)] + [(-1) ** (k - 1) * math.factorial(k - 1) / c**k for k in range(1, d + 1)]
            return self._compose(derivs)
        if name in ("sin", "cos"):
            cyc = [math.sin(c), math.cos(c), -math.sin(c), -math.cos(c)]
            start = 0 if name == "sin" else 1
            return self._compose([cyc[(start + k) % 4] for k in range(d + 1)])
        if name == "abs":
            return -self if c < 0 else TaylorSeries(self.arr.copy(), d)
        raise ValueError(f"unknown function {name!r}")


def series_min(a: TaylorSeries, b: TaylorSeries) -> TaylorSeries:
    return a if a.c0 <= b.c0 else b


def series_max(a: TaylorSeries, b: TaylorSeries) -> TaylorSeries:
    return a if a.c0 >= b.c0 else b


def series_from_jet(P: JetPolynomial, p: MultiIndex, d: int) -> TaylorSeries:
    """Series of ``D^p P`` around ``P.center``, truncated at degree ``d``."""
    n = P.dimension
    arr = np.zeros((d + 1,) * n)
    for q, a in P.coeffs.items():
        r = tuple(qi - pi for qi, pi in zip(q, p))
        if min(r) < 0 or sum(r) > d:
            continue
        arr[r] = a / mi_factorial(r)
    return TaylorSeries(arr, d)
