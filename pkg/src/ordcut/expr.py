"""Parsing and evaluation of nonlinear PDE operators.

An operator is written as an equation ``lhs = rhs`` where the left hand side
is an expression ``F(x, u, ..., D^p u, ...)`` built from constants,
coordinates, jet variables (derivatives of the unknown ``u``) and a closed set
of primitives. Derivatives are written either with named shorthands such as
``dt(u)``, ``dxx(u)``, ``dxy(u)`` or with an explicit multi-index
``D[1,0](u)``.

>>> op = parse("dt(u) + u*dx(u) = 0")
>>> op.dimension, op.order
(2, 1)
>>> eval_operator(op, (0.0, 0.0), {(0, 0): 2.0, (1, 0): 1.0, (0, 1): 3.0})
7.0

Evaluation never raises on domain errors: ``log`` of a non-positive number,
division by zero and fractional powers of negative numbers produce ``nan``,
which callers treat as an evaluation fault.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Mapping, Sequence

import numpy as np

MultiIndex = tuple[int, ...]

FUNCTIONS = {"sin": 1, "cos": 1, "exp": 1, "log": 1, "abs": 1, "min": 2, "max": 2}
NAMED_CONSTANTS = {"pi": math.pi}
CANONICAL_COORDS = "txyz"


class ParseError(ValueError):
    """Syntax or semantic error in PDE source text, with a byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.message = message
        self.offset = offset


@dataclass(frozen=True)
class ExprNode:
    """Immutable expression tree node.

    ``kind`` is one of ``const``, ``coord``, ``jet``, ``add``, ``sub``,
    ``mul``, ``div``, ``pow`` or ``func``. ``value`` holds the payload: the
    float for constants, the axis for coordinates, the multi-index for jet
    variables, the rational exponent for powers and the name for functions.
    """

    kind: str
    children: tuple["ExprNode", ...] = ()
    value: Any = None

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()


def const(v: float) -> ExprNode:
    return ExprNode("const", (), float(v))


def coord(i: int) -> ExprNode:
    return ExprNode("coord", (), int(i))


def jet(p: Sequence[int]) -> ExprNode:
    return ExprNode("jet", (), tuple(int(k) for k in p))


@dataclass(frozen=True)
class OperatorSpec:
    """A parsed operator ``T(x, D) u = rhs``.

    ``rhs`` is either ``None`` (the right hand side is a named field given
    separately, see ``rhs_label``) or an expression in the coordinates only.
    """

    dimension: int
    order: int
    lhs: ExprNode
    rhs_label: str
    coords: tuple[str, ...]
    rhs: ExprNode | None = None
    source: str = field(default="", compare=False)

    @property
    def algebraic(self) -> bool:
        """True when no jet variable occurs, i.e. the equation is not a PDE."""
        return not any(n.kind == "jet" for n in self.lhs.walk())


# ---------------------------------------------------------------------------
# tokenizer

_TOKEN_RE = re.compile(
    r"(?P<ws>\s+)"
    r"|(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()\[\],=])"
)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(source: str) -> list[_Tok]:
    try:
        source.encode("ascii")
    except UnicodeEncodeError as exc:
        raise ParseError("non-ASCII character", exc.start) from None
    toks = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", pos)
        if m.lastgroup != "ws":
            toks.append(_Tok(m.lastgroup, m.group(), pos))
        pos = m.end()
    toks.append(_Tok("end", "", len(source)))
    return toks


def _shorthand_axes(name: str) -> str | None:
    """Letters of a derivative shorthand like ``dxx`` -> ``xx``; else None."""
    if len(name) >= 2 and name[0] == "d" and name[1:].isalpha() and name[1:].islower():
        return name[1:]
    return None


def _infer_coords(toks: list[_Tok]) -> tuple[str, ...] | None:
    letters = set()
    for i, tok in enumerate(toks):
        if tok.kind != "name":
            continue
        axes = _shorthand_axes(tok.text)
        if axes is not None and tok.text not in FUNCTIONS and toks[i + 1].text == "(":
            letters.update(axes)
        elif tok.text in CANONICAL_COORDS and len(tok.text) == 1:
            letters.add(tok.text)
    if not letters:
        return None
    return tuple(sorted(letters, key=lambda c: (CANONICAL_COORDS.find(c) % 100, c)))


class _Parser:
    def __init__(self, source: str, coords: tuple[str, ...] | None, allow_label: bool):
        self.source = source
        self.toks = _tokenize(source)
        self.i = 0
        self.allow_label = allow_label
        if coords is None:
            coords = _infer_coords(self.toks)
            explicit_n = self._explicit_dimension()
            if coords is None:
                coords = ("t", "x") if explicit_n in (None, 2) else _default_coords(explicit_n)
            elif explicit_n is not None and explicit_n != len(coords):
                raise ParseError(
                    f"dimension mismatch: D[...] has {explicit_n} entries, "
                    f"coordinates {coords} inferred",
                    0,
                )
        self.coords = tuple(coords)
        self.labels: list[tuple[str, int]] = []

    def _explicit_dimension(self) -> int | None:
        for i, tok in enumerate(self.toks):
            if tok.text == "D" and self.toks[i + 1].text == "[":
                j = i + 2
                n = 1
                while self.toks[j].text not in ("]", ""):
                    if self.toks[j].text == ",":
                        n += 1
                    j += 1
                return n
        return None

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def take(self, text: str | None = None, kind: str | None = None) -> _Tok:
        tok = self.tok
        if (text is not None and tok.text != text) or (kind is not None and tok.kind != kind):
            want = repr(text) if text is not None else kind
            got = repr(tok.text) if tok.kind != "end" else "end of input"
            raise ParseError(f"expected {want}, got {got}", tok.pos)
        self.i += 1
        return tok

    # expr := term (("+"|"-") term)*
    def expr(self) -> ExprNode:
        node = self.term()
        while self.tok.text in ("+", "-"):
            op = self.take().text
            rhs = self.term()
            node = ExprNode("add" if op == "+" else "sub", (node, rhs))
        return node

    # term := unary (("*"|"/") unary)*
    def term(self) -> ExprNode:
        node = self.unary()
        while self.tok.text in ("*", "/"):
            op = self.take().text
            rhs = self.unary()
            node = ExprNode("mul" if op == "*" else "div", (node, rhs))
        return node

    def unary(self) -> ExprNode:
        if self.tok.text == "+":
            self.take()
            return self.unary()
        if self.tok.text == "-":
            self.take()
            if self.tok.kind == "num" and self.toks[self.i + 1].text != "^":
                return const(-float(self.take().text))
            return ExprNode("sub", (const(0.0), self.unary()))
        return self.factor()

    # factor := base ("^" rational)?
    def factor(self) -> ExprNode:
        node = self.base()
        if self.tok.text == "^":
            self.take()
            node = ExprNode("pow", (node,), self.rational())
        return node

    def rational(self) -> Fraction:
        if self.tok.text == "(":
            self.take()
            sign = -1 if self.tok.text == "-" else 1
            if sign < 0:
                self.take()
            num = Fraction(self.take(kind="num").text)
            if self.tok.text == "/":
                self.take()
                den_tok = self.take(kind="num")
                den = Fraction(den_tok.text)
                if den == 0:
                    raise ParseError("zero denominator in exponent", den_tok.pos)
                num = num / den
            self.take(")")
            return sign * num
        sign = 1
        if self.tok.text == "-":
            self.take()
            sign = -1
        return sign * Fraction(self.take(kind="num").text)

    def base(self) -> ExprNode:
        tok = self.tok
        if tok.kind == "num":
            self.take()
            return const(float(tok.text))
        if tok.text == "(":
            self.take()
            node = self.expr()
            self.take(")")
            return node
        if tok.kind != "name":
            got = repr(tok.text) if tok.kind != "end" else "end of input"
            raise ParseError(f"unexpected {got}", tok.pos)
        name = tok.text
        self.take()
        if name == "u":
            return jet((0,) * len(self.coords))
        if name == "D" and self.tok.text == "[":
            return self.explicit_derivative(tok)
        if name in FUNCTIONS:
            return self.call(name, tok)
        axes = _shorthand_axes(name)
        if axes is not None and self.tok.text == "(":
            return self.shorthand(axes, tok)
        if self.tok.text == "(":
            raise ParseError(f"unknown function {name!r}", tok.pos)
        if name in self.coords:
            return coord(self.coords.index(name))
        if name in NAMED_CONSTANTS:
            return ExprNode("const", (), NAMED_CONSTANTS[name])
        if self.allow_label:
            self.labels.append((name, tok.pos))
            return ExprNode("label", (), name)
        raise ParseError(f"unknown name {name!r}", tok.pos)

    def explicit_derivative(self, head: _Tok) -> ExprNode:
        self.take("[")
        orders = [int(self.take(kind="num").text)]
        while self.tok.text == ",":
            self.take()
            orders.append(int(self.take(kind="num").text))
        self.take("]")
        if len(orders) != len(self.coords):
            raise ParseError(
                f"dimension mismatch: D[...] has {len(orders)} entries for "
                f"{len(self.coords)} coordinates",
                head.pos,
            )
        self._unknown_argument()
        return jet(orders)

    def shorthand(self, axes: str, head: _Tok) -> ExprNode:
        orders = [0] * len(self.coords)
        for k, letter in enumerate(axes):
            if letter not in self.coords:
                raise ParseError(
                    f"dimension mismatch: coordinate {letter!r} is not declared "
                    f"(coordinates {self.coords})",
                    head.pos + 1 + k,
                )
            orders[self.coords.index(letter)] += 1
        self._unknown_argument()
        return jet(orders)

    def _unknown_argument(self) -> None:
        self.take("(")
        self.take("u")
        self.take(")")

    def call(self, name: str, head: _Tok) -> ExprNode:
        self.take("(")
        args = [self.expr()]
        while self.tok.text == ",":
            self.take()
            args.append(self.expr())
        self.take(")")
        arity = FUNCTIONS[name]
        if name in ("min", "max"):
            if len(args) < 2:
                raise ParseError(f"{name} needs at least two arguments", head.pos)
            node = args[0]
            for arg in args[1:]:
                node = ExprNode("func", (node, arg), name)
            return node
        if len(args) != arity:
            raise ParseError(f"{name} takes {arity} argument(s)", head.pos)
        return ExprNode("func", tuple(args), name)


def _default_coords(n: int) -> tuple[str, ...]:
    if n == 1:
        return ("x",)
    if n == 2:
        return ("t", "x")
    if n == 3:
        return ("x", "y", "z")
    return tuple(f"x{i}" for i in range(n))


def _has(node: ExprNode, kind: str) -> bool:
    return any(n.kind == kind for n in node.walk())


def parse(source: str, coords: Sequence[str] | None = None) -> OperatorSpec:
    """Parse an equation ``lhs = rhs`` into an :class:`OperatorSpec`.

    ``coords`` declares the coordinate names in axis order; when omitted they
    are inferred from derivative shorthands and bare coordinate references
    (ordered t, x, y, z), defaulting to ``("t", "x")``.
    """
    p = _Parser(source, tuple(coords) if coords is not None else None, allow_label=True)
    lhs = p.expr()
    p.take("=")
    rhs_start = p.tok.pos
    rhs = p.expr()
    p.take(kind="end")
    for name, pos in p.labels:
        if pos < rhs_start:
            raise ParseError(f"unknown name {name!r}", pos)

    if rhs.kind == "label":
        rhs_label, rhs_expr = rhs.value, None
    elif _has(rhs, "label"):
        name, pos = p.labels[0]
        raise ParseError(f"unknown name {name!r}", pos)
    elif _has(rhs, "jet"):
        lhs = ExprNode("sub", (lhs, rhs))
        rhs_expr = const(0.0)
        rhs_label = to_source(rhs_expr, p.coords)
    else:
        rhs_expr = rhs
        rhs_label = to_source(rhs, p.coords)

    degrees = [sum(n.value) for n in lhs.walk() if n.kind == "jet"]
    return OperatorSpec(
        dimension=len(p.coords),
        order=max(degrees, default=0),
        lhs=lhs,
        rhs_label=rhs_label,
        coords=p.coords,
        rhs=rhs_expr,
        source=source,
    )


def parse_expression(source: str, coords: Sequence[str]) -> ExprNode:
    """Parse a bare expression, e.g. a right hand side field or an oracle."""
    p = _Parser(source, tuple(coords), allow_label=False)
    node = p.expr()
    p.take(kind="end")
    return node


# ---------------------------------------------------------------------------
# printing


def _fmt_num(v: float) -> str:
    text = repr(float(v))
    return f"({text})" if v < 0 else text


def _fmt_exp(r: Fraction) -> str:
    if r.denominator == 1 and r >= 0:
        return str(r.numerator)
    return f"({r.numerator}/{r.denominator})" if r.denominator != 1 else f"({r.numerator})"


def to_source(node: ExprNode, coords: Sequence[str]) -> str:
    """Render ``node`` in the grammar; parsing the result gives back ``node``."""
    k = node.kind
    if k == "const":
        return _fmt_num(node.value)
    if k == "coord":
        return coords[node.value]
    if k == "jet":
        if not any(node.value):
            return "u"
        return "D[" + ",".join(str(i) for i in node.value) + "](u)"
    if k == "label":
        return node.value
    if k in ("add", "sub", "mul", "div"):
        sym = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[k]
        a, b = (to_source(c, coords) for c in node.children)
        return f"({a} {sym} {b})"
    if k == "pow":
        base = to_source(node.children[0], coords)
        if node.children[0].kind == "pow":
            base = f"({base})"
        return f"{base}^{_fmt_exp(node.value)}"
    if k == "func":
        args = ", ".join(to_source(c, coords) for c in node.children)
        return f"{node.value}({args})"
    raise ValueError(f"unknown node kind {k!r}")


def pretty(op: OperatorSpec) -> str:
    """Equation text for ``op`` that reparses to a structurally equal operator."""
    lhs = to_source(op.lhs, op.coords)
    rhs = op.rhs_label if op.rhs is None else to_source(op.rhs, op.coords)
    return f"{lhs} = {rhs}"


# ---------------------------------------------------------------------------
# evaluation


def _bad(mask, value):
    return np.where(mask, np.nan, value)


def evaluate(node: ExprNode, x: Sequence[Any], jet_values: Mapping[MultiIndex, Any]):
    """Evaluate ``node`` at coordinates ``x`` with derivative values ``jet_values``.

    Works elementwise on numpy arrays. Faults come back as ``nan``.
    """
    k = node.kind
    if k == "const":
        return np.float64(node.value)
    if k == "coord":
        return np.asarray(x[node.value], dtype=float)
    if k == "jet":
        try:
            return np.asarray(jet_values[node.value], dtype=float)
        except KeyError:
            raise KeyError(f"jet value for {node.value} not supplied") from None
    if k == "label":
        raise ValueError(f"cannot evaluate unresolved name {node.value!r}")
    args = [evaluate(c, x, jet_values) for c in node.children]
    with np.errstate(all="ignore"):
        if k == "add":
            return args[0] + args[1]
        if k == "sub":
            return args[0] - args[1]
        if k == "mul":
            return args[0] * args[1]
        if k == "div":
            return _bad(args[1] == 0, args[0] / np.where(args[1] == 0, 1.0, args[1]))
        if k == "pow":
            return _power(args[0], node.value)
        name = node.value
        if name == "sin":
            return np.sin(args[0])
        if name == "cos":
            return np.cos(args[0])
        if name == "exp":
            return np.exp(args[0])
        if name == "log":
            a = args[0]
            return _bad(a <= 0, np.log(np.where(a <= 0, 1.0, a)))
        if name == "abs":
            return np.abs(args[0])
        if name == "min":
            return np.minimum(args[0], args[1])
        if name == "max":
            return np.maximum(args[0], args[1])
    raise ValueError(f"unknown node kind {k!r}")


def _power(a, r: Fraction):
    if r.denominator == 1:
        n = r.numerator
        if n >= 0:
            return a ** n
        return _bad(a == 0, 1.0 / np.where(a == 0, 1.0, a) ** (-n))
    bad = (a < 0) | ((a == 0) & (r < 0))
    safe = np.where(bad, 1.0, a)
    return _bad(bad, safe ** float(r))


def eval_operator(op: OperatorSpec, x: Sequence[float], jet_values: Mapping[MultiIndex, float]) -> float:
    """Value of the operator body ``F(x, jet)``; ``nan`` marks an evaluation fault."""
    if len(x) != op.dimension:
        raise ValueError(f"point has {len(x)} coordinates, operator has dimension {op.dimension}")
    value = float(evaluate(op.lhs, x, jet_values))
    return value if math.isfinite(value) else math.nan


def is_fault(value) -> bool:
    return not np.all(np.isfinite(value))


def free_jet_variables(op: OperatorSpec) -> list[MultiIndex]:
    """Jet variables of ``op.lhs`` by descending degree, then descending lexicographic.

    The head of the list is the coefficient the local solver solves for.
    """
    found = {n.value for n in op.lhs.walk() if n.kind == "jet"}
    return sorted(found, key=lambda p: (sum(p), p), reverse=True)


def evaluate_series(node: ExprNode, coord_series: Sequence, jet_series: Mapping[MultiIndex, Any]):
    """Evaluate ``node`` in truncated Taylor arithmetic.

    ``coord_series[i]`` is the series of coordinate ``i`` about the expansion
    point and ``jet_series[p]`` the series of ``D^p u``. Domain faults give a
    series of ``nan``.
    """
    from .jets import series_max, series_min

    k = node.kind
    if k == "const":
        return node.value
    if k == "coord":
        return coord_series[node.value]
    if k == "jet":
        return jet_series[node.value]
    args = [evaluate_series(c, coord_series, jet_series) for c in node.children]
    template = next((a for a in args if not isinstance(a, float)), None)
    if template is None:
        return float(evaluate(node, (), {})) if k != "label" else math.nan
    args = [template._lift(a) for a in args]
    if k == "add":
        return args[0] + args[1]
    if k == "sub":
        return args[0] - args[1]
    if k == "mul":
        return args[0] * args[1]
    if k == "div":
        return args[0] / args[1]
    if k == "pow":
        return args[0].power(node.value)
    name = node.value
    if name == "min":
        return series_min(args[0], args[1])
    if name == "max":
        return series_max(args[0], args[1])
    return args[0].func(name)
