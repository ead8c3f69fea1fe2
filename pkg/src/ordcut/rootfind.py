"""Derivative-free scalar root finding: bracket by expansion, then bisect."""
from __future__ import annotations

import math
from typing import Callable


class NoBracketFound(ValueError):
    pass


def _finite(v: float) -> bool:
    return v is not None and math.isfinite(v)


def find_bracket(
    g: Callable[[float], float],
    center: float = 0.0,
    half_width: float = 1.0,
    max_doublings: int = 60,
    subdivisions: int = 8,
) -> tuple[float, float, float, float]:
    """Find ``a < b`` with ``g(a)``, ``g(b)`` finite and of opposite sign.

    The window ``[center - w, center + w]`` starts at ``w = half_width`` and
    doubles until it contains a sign change among ``subdivisions + 1`` equally
    spaced samples. Among sign changes the segment nearest ``center`` wins.
    Returns ``(a, b, g(a), g(b))``; an exact zero gives ``a == b``.
    """
    w = half_width
    for _ in range(max_doublings + 1):
        xs = [center - w + 2 * w * i / subdivisions for i in range(subdivisions + 1)]
        gs = [g(x) for x in xs]
        best = None
        for i, (x, v) in enumerate(zip(xs, gs)):
            if v == 0.0:
                cand = (abs(x - center), x, x, v, v)
                best = cand if best is None or cand[0] < best[0] else best
        for i in range(subdivisions):
            ga, gb = gs[i], gs[i + 1]
            if _finite(ga) and _finite(gb) and (ga < 0) != (gb < 0) and ga != 0.0 and gb != 0.0:
                dist = abs(0.5 * (xs[i] + xs[i + 1]) - center)
                if best is None or dist < best[0]:
                    best = (dist, xs[i], xs[i + 1], ga, gb)
        if best is not None:
            return best[1:]
        w *= 2.0
    raise NoBracketFound(f"no sign change within +-{w / 2:g} of {center:g}")


def bisect(g: Callable[[float], float], a: float, b: float, ga: float, gb: float, max_iter: int = 200) -> float:
    """Bisection on a verified bracket until the midpoint stops moving.

    Faulting midpoints (non-finite ``g``) are treated as unusable and the
    search continues on the half that still has two finite endpoints, which
    only happens when faults sit strictly inside the bracket.
    """
    if a == b:
        return a
    for _ in range(max_iter):
        mid = 0.5 * (a + b)
        if mid <= a or mid >= b:
            break
        gm = g(mid)
        if gm == 0.0:
            return mid
        if not _finite(gm):
            raise NoBracketFound(f"evaluation fault inside bracket at {mid:g}")
        if (gm < 0) == (ga < 0):
            a, ga = mid, gm
        else:
            b, gb = mid, gm
    return a if abs(ga) <= abs(gb) else b


def solve(g: Callable[[float], float], center: float = 0.0, max_doublings: int = 60) -> float:
    a, b, ga, gb = find_bracket(g, center, max_doublings=max_doublings)
    return bisect(g, a, b, ga, gb)
