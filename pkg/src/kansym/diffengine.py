"""Reverse-mode automatic differentiation over a scalar-operation tape.

Graphs are built from scalar primitives. A node value is either a 0-d array
(parameters, reductions) or a 1-d array holding the same scalar evaluated at
every data point, so one tape covers a whole full-batch objective.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

GUARD_MARGIN = 1e-8

# (value, partials per parent, saturated count)
PrimitiveResult = tuple[np.ndarray, tuple[Any, ...], int]


# ---------------------------------------------------------------------------
# Domain guards (shared with the numpy evaluation paths)
# ---------------------------------------------------------------------------


def guard_positive(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamp into [margin, inf). Returns (clamped, inside-mask)."""
    inside = x >= GUARD_MARGIN
    return np.where(inside, x, GUARD_MARGIN), inside


def guard_nonzero(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Push |x| < margin out to +-margin (zero goes to +margin)."""
    inside = np.abs(x) >= GUARD_MARGIN
    pushed = np.where(x < 0, -GUARD_MARGIN, GUARD_MARGIN)
    return np.where(inside, x, pushed), inside


def guard_unit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamp into [-1 + margin, 1 - margin]."""
    bound = 1.0 - GUARD_MARGIN
    inside = np.abs(x) <= bound
    return np.clip(x, -bound, bound), inside


def _count(inside: np.ndarray) -> int:
    return int(np.size(inside) - np.count_nonzero(inside))


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _add(v, _):
    return v[0] + v[1], (1.0, 1.0), 0


def _sub(v, _):
    return v[0] - v[1], (1.0, -1.0), 0


def _mul(v, _):
    return v[0] * v[1], (v[1], v[0]), 0


def _div(v, _):
    den, inside = guard_nonzero(v[1])
    out = v[0] / den
    return out, (1.0 / den, np.where(inside, -out / den, 0.0)), _count(inside)


def _neg(v, _):
    return -v[0], (-1.0,), 0


def _pow(v, exponent):
    x = v[0]
    p = float(exponent)
    if p.is_integer() and p >= 0:
        out = x**p
        d = p * x ** (p - 1) if p > 0 else np.zeros_like(x)
        return out, (d,), 0
    if p.is_integer():
        base, inside = guard_nonzero(x)
    else:
        base, inside = guard_positive(x)
    out = base**p
    return out, (np.where(inside, p * base ** (p - 1), 0.0),), _count(inside)


def _exp(v, _):
    out = np.exp(v[0])
    return out, (out,), 0


def _log(v, _):
    base, inside = guard_positive(v[0])
    return np.log(base), (np.where(inside, 1.0 / base, 0.0),), _count(inside)


def _sqrt(v, _):
    base, inside = guard_positive(v[0])
    out = np.sqrt(base)
    return out, (np.where(inside, 0.5 / out, 0.0),), _count(inside)


def _sin(v, _):
    return np.sin(v[0]), (np.cos(v[0]),), 0


def _cos(v, _):
    return np.cos(v[0]), (-np.sin(v[0]),), 0


def _tan(v, _):
    out = np.tan(v[0])
    return out, (1.0 + out * out,), 0


def _tanh(v, _):
    out = np.tanh(v[0])
    return out, (1.0 - out * out,), 0


def _asinh(v, _):
    x = v[0]
    return np.arcsinh(x), (1.0 / np.sqrt(1.0 + x * x),), 0


def _abs(v, _):
    return np.abs(v[0]), (np.sign(v[0]),), 0


def _atan(v, _):
    x = v[0]
    return np.arctan(x), (1.0 / (1.0 + x * x),), 0


def _asin(v, _):
    x, inside = guard_unit(v[0])
    d = np.where(inside, 1.0 / np.sqrt(1.0 - x * x), 0.0)
    return np.arcsin(x), (d,), _count(inside)


def _acos(v, _):
    x, inside = guard_unit(v[0])
    d = np.where(inside, -1.0 / np.sqrt(1.0 - x * x), 0.0)
    return np.arccos(x), (d,), _count(inside)


def _atanh(v, _):
    x, inside = guard_unit(v[0])
    d = np.where(inside, 1.0 / (1.0 - x * x), 0.0)
    return np.arctanh(x), (d,), _count(inside)


def _gaussian(v, _):
    x = v[0]
    out = np.exp(-x * x)
    return out, (-2.0 * x * out,), 0


def _sign(v, _):
    return np.sign(v[0]), (np.zeros_like(v[0]),), 0


def _clamp(v, bounds):
    lo, hi = bounds
    x = v[0]
    inside = (x >= lo) & (x <= hi)
    return np.clip(x, lo, hi), (inside.astype(float),), 0


def _sum(v, _):
    out = v[0]
    for extra in v[1:]:
        out = out + extra
    return out, (1.0,) * len(v), 0


def _detached_max(v, _):
    # softmax shift; its gradient contributions cancel, so none flow
    out = v[0]
    for extra in v[1:]:
        out = np.maximum(out, extra)
    return out, tuple(np.zeros_like(x) for x in v), 0


def _mean(v, _):
    x = v[0]
    n = max(np.size(x), 1)
    return np.asarray(np.mean(x)), (np.full(np.shape(x), 1.0 / n),), 0


def _basis(v, basis):
    # parents: (x, c_0, ..., c_{n-1}); basis provides design(x) -> (B, dB)
    x = v[0]
    coef = np.array([float(c) for c in v[1:]])
    design, slope = basis.design(x)
    out = design @ coef
    partials = (slope @ coef,) + tuple(design[..., i] for i in range(coef.size))
    return out, partials, 0


PRIMITIVES: dict[str, Callable[[list[np.ndarray], Any], PrimitiveResult]] = {
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "div": _div,
    "neg": _neg,
    "pow": _pow,
    "exp": _exp,
    "log": _log,
    "sqrt": _sqrt,
    "sin": _sin,
    "cos": _cos,
    "tan": _tan,
    "tanh": _tanh,
    "asinh": _asinh,
    "abs": _abs,
    "atan": _atan,
    "asin": _asin,
    "acos": _acos,
    "atanh": _atanh,
    "gaussian": _gaussian,
    "sign": _sign,
    "clamp": _clamp,
    "sum": _sum,
    "mean": _mean,
    "detached_max": _detached_max,
    "basis": _basis,
}

LEAF_OPS = ("param", "input", "const")


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    op: str
    parents: tuple[int, ...] = ()
    attr: Any = None


class Tape:
    """Dynamic record of primitive operations with per-node values."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self.partials: list[tuple[Any, ...]] = []
        self.adjoints: list[np.ndarray | None] = []
        self.params: list[int] = []
        self.inputs: list[int] = []
        self.saturated = 0
        self.output: int | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, node: Node, value: np.ndarray,
              partials: tuple[Any, ...]) -> Var:
        self.nodes.append(node)
        self.values.append(value)
        self.partials.append(partials)
        return Var(self, len(self.nodes) - 1)

    def param(self, value: float) -> Var:
        var = self._push(Node("param"), np.asarray(float(value)), ())
        self.params.append(var.index)
        return var

    def input(self, value: float | np.ndarray) -> Var:
        var = self._push(Node("input"), np.asarray(value, dtype=float), ())
        self.inputs.append(var.index)
        return var

    def const(self, value: float | np.ndarray) -> Var:
        return self._push(Node("const"), np.asarray(value, dtype=float), ())

    def lift(self, value: Var | float | np.ndarray) -> Var:
        if isinstance(value, Var):
            if value.tape is not self:
                raise ValueError("variable belongs to another tape")
            return value
        return self.const(value)

    def apply(self, op: str, *args: Var | float | np.ndarray,
              attr: Any = None) -> Var:
        parents = tuple(self.lift(a).index for a in args)
        value, partials, saturated = _evaluate(
            op, [self.values[p] for p in parents], attr,
        )
        self.saturated += saturated
        return self._push(Node(op, parents, attr), value, partials)

    def sum(self, terms: Sequence[Var | float]) -> Var:
        if not terms:
            return self.const(0.0)
        if len(terms) == 1:
            return self.lift(terms[0])
        return self.apply("sum", *terms)

    def detached_max(self, terms: Sequence[Var]) -> Var:
        """Elementwise max of ``terms``, refreshed on replay, with no gradient."""
        return self.apply("detached_max", *terms)

    def replay(self, params: Sequence[float] | None = None) -> np.ndarray:
        """Re-run every recorded primitive from the leaves.

        With ``params`` given, parameter leaves take the new values (in
        recording order) and all values and partials are refreshed.
        """
        if params is not None:
            if len(params) != len(self.params):
                raise ValueError("parameter vector length mismatch")
            for idx, value in zip(self.params, params):
                self.values[idx] = np.asarray(float(value))
        self.saturated = 0
        for k, node in enumerate(self.nodes):
            if node.op in LEAF_OPS:
                continue
            value, partials, saturated = _evaluate(
                node.op, [self.values[p] for p in node.parents], node.attr,
            )
            self.values[k] = value
            self.partials[k] = partials
            self.saturated += saturated
        out = self.output if self.output is not None else len(self.nodes) - 1
        return self.values[out]

    def adjoint(self, index: int) -> np.ndarray:
        if index < len(self.adjoints) and self.adjoints[index] is not None:
            return self.adjoints[index]
        return np.zeros_like(self.values[index])


def _evaluate(op: str, values: list[np.ndarray], attr: Any) -> PrimitiveResult:
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        value, partials, saturated = PRIMITIVES[op](values, attr)
    return np.asarray(value, dtype=float), partials, saturated


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    grad = np.asarray(grad, dtype=float)
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    return np.broadcast_to(grad, shape).copy()


class Var:
    """Handle to a tape node supporting arithmetic and the primitive set."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int) -> None:
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    def __repr__(self) -> str:
        return f"Var({self.tape.nodes[self.index].op}#{self.index})"

    def _op(self, op: str, *others: Var | float | np.ndarray,
            attr: Any = None) -> Var:
        return self.tape.apply(op, self, *others, attr=attr)

    def __add__(self, other):
        return self._op("add", other)

    def __radd__(self, other):
        return self.tape.apply("add", other, self)

    def __sub__(self, other):
        return self._op("sub", other)

    def __rsub__(self, other):
        return self.tape.apply("sub", other, self)

    def __mul__(self, other):
        return self._op("mul", other)

    def __rmul__(self, other):
        return self.tape.apply("mul", other, self)

    def __truediv__(self, other):
        return self._op("div", other)

    def __rtruediv__(self, other):
        return self.tape.apply("div", other, self)

    def __neg__(self):
        return self._op("neg")

    def __pow__(self, exponent: float):
        if isinstance(exponent, Var):
            raise TypeError("only constant exponents are supported")
        return self._op("pow", attr=float(exponent))

    def exp(self) -> Var:
        return self._op("exp")

    def log(self) -> Var:
        return self._op("log")

    def sqrt(self) -> Var:
        return self._op("sqrt")

    def sin(self) -> Var:
        return self._op("sin")

    def cos(self) -> Var:
        return self._op("cos")

    def tan(self) -> Var:
        return self._op("tan")

    def tanh(self) -> Var:
        return self._op("tanh")

    def asinh(self) -> Var:
        return self._op("asinh")

    def abs(self) -> Var:
        return self._op("abs")

    def atan(self) -> Var:
        return self._op("atan")

    def asin(self) -> Var:
        return self._op("asin")

    def acos(self) -> Var:
        return self._op("acos")

    def atanh(self) -> Var:
        return self._op("atanh")

    def gaussian(self) -> Var:
        return self._op("gaussian")

    def sign(self) -> Var:
        return self._op("sign")

    def clamp(self, lo: float, hi: float) -> Var:
        return self._op("clamp", attr=(float(lo), float(hi)))

    def mean(self) -> Var:
        return self._op("mean")


# ---------------------------------------------------------------------------
# Forward / backward entry points
# ---------------------------------------------------------------------------

Graph = Callable[[Tape, list[Var], list[Var]], Var]


def record_forward(
    graph: Graph,
    inputs: Sequence[float] | np.ndarray,
    params: Sequence[float] | np.ndarray,
) -> tuple[np.ndarray, Tape]:
    """Record ``graph`` on a fresh tape.

    ``inputs`` is either one point (1-d, one leaf per feature) or a
    points-by-features matrix (one leaf per column).
    """
    tape = Tape()
    arr = np.asarray(inputs, dtype=float)
    columns = arr.T if arr.ndim == 2 else arr
    xs = [tape.input(col) for col in columns]
    ps = [tape.param(p) for p in np.asarray(params, dtype=float).ravel()]
    out = graph(tape, xs, ps)
    tape.output = out.index
    return out.value, tape


def backward(tape: Tape, seed: np.ndarray | float | None = None) -> np.ndarray:
    """Accumulate adjoints from the output; return d(output)/d(params).

    ``seed`` is the adjoint of the output node (1 for a scalar loss).
    """
    out = tape.output if tape.output is not None else len(tape.nodes) - 1
    adjoints: list[np.ndarray | None] = [None] * len(tape.nodes)
    start = np.ones_like(tape.values[out]) if seed is None else seed
    adjoints[out] = np.asarray(start, dtype=float)
    for k in range(out, -1, -1):
        adj = adjoints[k]
        if adj is None:
            continue
        node = tape.nodes[k]
        for parent, partial in zip(node.parents, tape.partials[k]):
            contrib = _unbroadcast(partial * adj, tape.values[parent].shape)
            prev = adjoints[parent]
            adjoints[parent] = contrib if prev is None else prev + contrib
    tape.adjoints = adjoints
    return np.array([float(np.sum(tape.adjoint(i))) for i in tape.params])


def finite_difference(
    graph: Graph,
    inputs: Sequence[float] | np.ndarray,
    params: Sequence[float] | np.ndarray,
    h: float = 1e-6,
) -> np.ndarray:
    """Central-difference gradient of a scalar graph, for checks."""
    base = np.asarray(params, dtype=float).ravel()
    grad = np.zeros_like(base)
    for i in range(base.size):
        up, down = base.copy(), base.copy()
        up[i] += h
        down[i] -= h
        f_up, _ = record_forward(graph, inputs, up)
        f_down, _ = record_forward(graph, inputs, down)
        grad[i] = (float(f_up) - float(f_down)) / (2.0 * h)
    return grad


def gradient_error(analytic: np.ndarray, numeric: np.ndarray,
                   atol: float = 1e-7) -> float:
    """Max relative error, falling back to absolute error near zero."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(diff <= atol, 0.0, diff / np.maximum(scale, 1e-300))
    return float(rel.max()) if rel.size else 0.0


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moments and step counter for one parameter vector."""
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    frozen: np.ndarray | None = field(default=None)

    @classmethod
    def for_params(cls, n: int, lr: float = 1e-2, **kwargs: Any) -> AdamState:
        return cls(m=np.zeros(n), v=np.zeros(n), lr=lr, **kwargs)


def adam_step(params: np.ndarray, grad: np.ndarray,
              state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update; returns the new parameter vector."""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if not (params.shape == grad.shape == state.m.shape == state.v.shape):
        raise ValueError("parameter, gradient and moment lengths differ")
    if state.frozen is not None:
        grad = np.where(state.frozen, 0.0, grad)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
