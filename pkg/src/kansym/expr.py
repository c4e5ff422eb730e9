"""Expression trees: canonical construction, text round-trip and light simplification.

Grammar (infix)::

    expr   := ['+' | '-'] term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := atom ('^' ['-'] INTEGER)*
    atom   := NUMBER | 'pi' | VARIABLE | FUNCTION '(' expr ')' | '(' expr ')'
            | '-' factor

Functions are named as in the operator library (``sin``, ``arctan``,
``gauss`` for exp(-x^2), ...). Only integer powers exist; ``a/b`` is read as
``a*b^-1``. Variables are ``x1..xd`` unless a name list is supplied.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import Enum

import numpy as np

from kansym.diffengine import guard_nonzero, guard_positive, guard_unit
from kansym.errors import ExprSyntaxError


class Kind(str, Enum):
    VAR = "var"
    CONST = "const"
    UNARY = "unary"
    ADD = "add"
    MUL = "mul"
    POW = "pow"
    OPAQUE = "opaque"


FUNCTIONS = (
    "sin", "cos", "tan", "tanh", "exp", "log", "sqrt", "abs", "sgn",
    "arctan", "arcsin", "arccos", "arctanh", "gauss",
)

_RAW = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "tanh": np.tanh,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "sgn": np.sign,
    "arctan": np.arctan,
    "arcsin": np.arcsin,
    "arccos": np.arccos,
    "arctanh": np.arctanh,
    "gauss": lambda u: np.exp(-u * u),
}

_GUARDS = {
    "log": guard_positive,
    "sqrt": guard_positive,
    "arcsin": guard_unit,
    "arccos": guard_unit,
    "arctanh": guard_unit,
}

_KIND_RANK = {
    Kind.VAR: 0, Kind.POW: 1, Kind.UNARY: 2, Kind.MUL: 3, Kind.ADD: 4,
    Kind.OPAQUE: 5, Kind.CONST: 6,
}


@dataclass(frozen=True)
class Expr:
    kind: Kind
    children: tuple[Expr, ...] = ()
    value: float = 0.0
    name: str = ""

    def __str__(self) -> str:
        return to_text(self)

    @property
    def is_const(self) -> bool:
        return self.kind is Kind.CONST


# ---------------------------------------------------------------------------
# Canonical constructors
# ---------------------------------------------------------------------------


def var(index: int) -> Expr:
    if index < 1:
        raise ValueError("variables are numbered from 1")
    return Expr(Kind.VAR, value=float(index))


def const(value: float) -> Expr:
    return Expr(Kind.CONST, value=float(value))


def unary(name: str, child: Expr) -> Expr:
    if name not in FUNCTIONS:
        raise ValueError(f"unknown function {name!r}")
    return Expr(Kind.UNARY, (child,), name=name)


def opaque(label: str, child: Expr) -> Expr:
    """Placeholder for an edge that has no closed form."""
    return Expr(Kind.OPAQUE, (child,), name=label)


def power(base: Expr, exponent: int) -> Expr:
    if float(exponent) != int(exponent):
        raise ValueError("only integer powers are supported")
    return Expr(Kind.POW, (base,), value=float(int(exponent)))


def first_var(node: Expr) -> int:
    if node.kind is Kind.VAR:
        return int(node.value)
    indices = [first_var(c) for c in node.children]
    return min(indices, default=1 << 30)


def _order_key(node: Expr) -> tuple:
    fn_rank = FUNCTIONS.index(node.name) if node.kind is Kind.UNARY else -1
    return (first_var(node), _KIND_RANK[node.kind], fn_rank, node.value,
            to_text(node, digits=None))


def add(*terms: Expr) -> Expr:
    flat: list[Expr] = []
    for t in terms:
        flat.extend(t.children if t.kind is Kind.ADD else (t,))
    consts = [t.value for t in flat if t.is_const]
    rest = sorted((t for t in flat if not t.is_const), key=_order_key)
    if consts:
        rest.append(const(math.fsum(consts)))
    if not rest:
        return const(0.0)
    if len(rest) == 1:
        return rest[0]
    return Expr(Kind.ADD, tuple(rest))


def mul(*factors: Expr) -> Expr:
    flat: list[Expr] = []
    for f in factors:
        flat.extend(f.children if f.kind is Kind.MUL else (f,))
    consts = [f.value for f in flat if f.is_const]
    rest = sorted((f for f in flat if not f.is_const), key=_order_key)
    if consts:
        rest.insert(0, const(math.prod(consts)))
    if not rest:
        return const(1.0)
    if len(rest) == 1:
        return rest[0]
    return Expr(Kind.MUL, tuple(rest))


def neg(node: Expr) -> Expr:
    if node.is_const:
        return const(-node.value)
    if node.kind is Kind.MUL and node.children[0].is_const:
        return mul(const(-node.children[0].value), *node.children[1:])
    return mul(const(-1.0), node)


def sub(a: Expr, b: Expr) -> Expr:
    return add(a, neg(b))


def div(a: Expr, b: Expr) -> Expr:
    return mul(a, power(b, -1))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _fmt(value: float, digits: int | None) -> str:
    if digits is None:
        return repr(float(value))
    return f"{value:.{digits}g}"


def _split_coefficient(node: Expr) -> tuple[float, Expr | None]:
    """Leading constant and remaining factors of a product."""
    if node.is_const:
        return node.value, None
    if node.kind is Kind.MUL and node.children[0].is_const:
        return node.children[0].value, mul(*node.children[1:])
    return 1.0, node


def to_text(node: Expr, digits: int | None = 6,
            names: list[str] | None = None) -> str:
    """Canonical infix text; ``digits=None`` keeps full float precision."""

    def name_of(index: int) -> str:
        return names[index - 1] if names else f"x{index}"

    def emit(n: Expr) -> str:
        kind = n.kind
        if kind is Kind.CONST:
            return _fmt(n.value, digits)
        if kind is Kind.VAR:
            return name_of(int(n.value))
        if kind in (Kind.UNARY, Kind.OPAQUE):
            return f"{n.name}({emit(n.children[0])})"
        if kind is Kind.POW:
            base = n.children[0]
            text = emit(base)
            if base.kind in (Kind.ADD, Kind.MUL, Kind.POW) or (
                base.is_const and (base.value < 0 or "e" in text)
            ):
                text = f"({text})"
            return f"{text}^{int(n.value)}"
        if kind is Kind.MUL:
            head = n.children[0]
            parts = []
            for child in n.children:
                text = emit(child)
                parts.append(f"({text})" if child.kind is Kind.ADD else text)
            if head.is_const and head.value == -1.0 and len(parts) > 1:
                return "-" + "*".join(parts[1:])
            return "*".join(parts)
        pieces: list[str] = []
        for i, term in enumerate(n.children):
            coeff, rest = _split_coefficient(term)
            if i > 0 and coeff < 0:
                if rest is None:
                    pieces.append(f" - {_fmt(-coeff, digits)}")
                elif -coeff == 1.0:
                    text = emit(rest)
                    pieces.append(f" - ({text})" if rest.kind is Kind.ADD
                                  else f" - {text}")
                else:
                    pieces.append(f" - {emit(mul(const(-coeff), rest))}")
            else:
                pieces.append((" + " if i > 0 else "") + emit(term))
        return "".join(pieces)

    return emit(node)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^()]))"
)


class _Parser:
    def __init__(self, text: str, names: list[str] | None) -> None:
        self.text = text
        self.names = names
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        stripped = text.rstrip()
        while pos < len(stripped):
            m = _TOKEN.match(stripped, pos)
            if m is None or m.end() == pos:
                raise ExprSyntaxError("unexpected character", text, pos)
            kind = m.lastgroup or ""
            value = m.group(kind)
            if value == "**":
                value = "^"
            self.tokens.append((kind, value, m.start(kind)))
            pos = m.end()
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        if self.i < len(self.tokens):
            return self.tokens[self.i]
        return ("end", "", len(self.text))

    def take(self) -> tuple[str, str, int]:
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, value: str) -> None:
        kind, got, pos = self.take()
        if got != value:
            raise ExprSyntaxError(f"expected {value!r}", self.text, pos)

    def parse(self) -> Expr:
        node = self.expr()
        kind, _, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError("unexpected trailing input", self.text, pos)
        return node

    def expr(self) -> Expr:
        _, tok, _ = self.peek()
        sign = 1
        if tok in ("+", "-"):
            self.take()
            sign = -1 if tok == "-" else 1
        first = self.term()
        terms = [neg(first) if sign < 0 else first]
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            t = self.term()
            terms.append(t if op == "+" else neg(t))
        return add(*terms)

    def term(self) -> Expr:
        node = self.factor()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            rhs = self.factor()
            node = mul(node, rhs) if op == "*" else div(node, rhs)
        return node

    def factor(self) -> Expr:
        node = self.atom()
        while self.peek()[1] == "^":
            self.take()
            sign = 1
            if self.peek()[1] == "-":
                self.take()
                sign = -1
            kind, tok, pos = self.take()
            if kind != "num" or not re.fullmatch(r"\d+", tok):
                raise ExprSyntaxError("expected integer exponent", self.text, pos)
            node = power(node, sign * int(tok))
        return node

    def atom(self) -> Expr:
        kind, tok, pos = self.take()
        if kind == "num":
            return const(float(tok))
        if tok == "(":
            node = self.expr()
            self.expect(")")
            return node
        if tok == "-":
            return neg(self.factor())
        if kind == "name":
            if self.peek()[1] == "(":
                if tok not in FUNCTIONS:
                    raise ExprSyntaxError(f"unknown function {tok!r}", self.text, pos)
                self.take()
                arg = self.expr()
                self.expect(")")
                return unary(tok, arg)
            if tok == "pi":
                return const(math.pi)
            if self.names is not None:
                if tok in self.names:
                    return var(self.names.index(tok) + 1)
                raise ExprSyntaxError(f"unknown variable {tok!r}", self.text, pos)
            m = re.fullmatch(r"x([1-9]\d*)", tok)
            if m:
                return var(int(m.group(1)))
            raise ExprSyntaxError(f"unknown name {tok!r}", self.text, pos)
        raise ExprSyntaxError("unexpected token", self.text, pos)


def parse(text: str, names: list[str] | None = None) -> Expr:
    """Parse infix text into a canonical tree."""
    return _Parser(text, names).parse()


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def apply_function(name: str, u: np.ndarray, guarded: bool = False) -> np.ndarray:
    if guarded and name in _GUARDS:
        u, _ = _GUARDS[name](u)
    return _RAW[name](u)


def evaluate(node: Expr, x: np.ndarray, guarded: bool = False) -> np.ndarray:
    """Evaluate on a points-by-variables matrix.

    ``guarded`` applies the same domain clamps as model edges; unguarded
    evaluation returns nan/inf outside a function's domain.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]

    def ev(e: Expr) -> np.ndarray:
        kind = e.kind
        if kind is Kind.CONST:
            return np.full(n, e.value)
        if kind is Kind.VAR:
            return x[:, int(e.value) - 1]
        if kind is Kind.UNARY:
            return apply_function(e.name, ev(e.children[0]), guarded)
        if kind is Kind.OPAQUE:
            return np.full(n, np.nan)
        if kind is Kind.ADD:
            return np.sum([ev(c) for c in e.children], axis=0)
        if kind is Kind.MUL:
            return np.prod([ev(c) for c in e.children], axis=0)
        base = ev(e.children[0])
        if guarded and e.value < 0:
            base, _ = guard_nonzero(base)
        return base ** e.value

    with np.errstate(all="ignore"):
        return ev(node)


def variables(node: Expr) -> set[int]:
    if node.kind is Kind.VAR:
        return {int(node.value)}
    out: set[int] = set()
    for child in node.children:
        out |= variables(child)
    return out


def has_opaque(node: Expr) -> bool:
    return node.kind is Kind.OPAQUE or any(has_opaque(c) for c in node.children)


# ---------------------------------------------------------------------------
# Simplification
# ---------------------------------------------------------------------------


def _finite(value: float) -> bool:
    return bool(np.isfinite(value))


def simplify(node: Expr) -> Expr:
    """Constant folding, zero/one elimination, affine collapse, like terms."""
    kind = node.kind
    if kind in (Kind.CONST, Kind.VAR):
        return node
    children = tuple(simplify(c) for c in node.children)

    if kind is Kind.OPAQUE:
        return opaque(node.name, children[0])

    if kind is Kind.UNARY:
        child = children[0]
        if child.is_const:
            with np.errstate(all="ignore"):
                value = float(apply_function(node.name, np.array(child.value), True))
            if _finite(value):
                return const(value)
        return unary(node.name, child)

    if kind is Kind.POW:
        base, n = children[0], int(node.value)
        if n == 0:
            return const(1.0)
        if n == 1:
            return base
        if base.kind is Kind.POW:
            return simplify(power(base.children[0], n * int(base.value)))
        if base.is_const and not (base.value == 0 and n < 0):
            value = base.value ** n
            if _finite(value):
                return const(value)
        return power(base, n)

    if kind is Kind.MUL:
        prod = mul(*children)
        coeff, rest = _split_coefficient(prod)
        if rest is None:
            return const(coeff)
        if coeff == 0.0:
            return const(0.0)
        if rest.kind is Kind.ADD and coeff != 1.0:
            return simplify(add(*(mul(const(coeff), t) for t in rest.children)))
        return rest if coeff == 1.0 else mul(const(coeff), rest)

    # ADD: merge like terms by their non-constant part
    total = add(*children)
    if total.kind is not Kind.ADD:
        return simplify(total) if total.kind is Kind.MUL else total
    groups: dict[str, tuple[float, Expr | None]] = {}
    order: list[str] = []
    for term in total.children:
        coeff, rest = _split_coefficient(term)
        key = "" if rest is None else to_text(rest, digits=None)
        if key not in groups:
            groups[key] = (0.0, rest)
            order.append(key)
        groups[key] = (groups[key][0] + coeff, rest)
    terms: list[Expr] = []
    for key in order:
        coeff, rest = groups[key]
        if coeff == 0.0:
            continue
        if rest is None:
            terms.append(const(coeff))
        else:
            terms.append(rest if coeff == 1.0 else mul(const(coeff), rest))
    return add(*terms)


def canonical(node: Expr, digits: int | None = 6) -> str:
    """Simplified canonical text, used to compare recovered formulas."""
    return to_text(simplify(node), digits=digits)
