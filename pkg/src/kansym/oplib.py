"""The symbolic operator library, affine-wrapped symbolic edges and local fitting."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np

from kansym import expr
from kansym.diffengine import (
    AdamState,
    Var,
    adam_step,
    backward,
    guard_nonzero,
    guard_positive,
    guard_unit,
    record_forward,
)

logger = logging.getLogger(__name__)

FIT_STARTS = 8
FIT_STEPS = 200
FIT_LR = 0.05
MIN_SAMPLES = 8


class Domain(str, Enum):
    REAL = "real"
    POSITIVE = "positive"
    NONZERO = "nonzero"
    UNIT = "unit"


class FormId(str, Enum):
    CONST = "const"
    ZERO = "zero"
    IDENTITY = "x"
    X2 = "x^2"
    X3 = "x^3"
    X4 = "x^4"
    X5 = "x^5"
    INV = "1/x"
    INV2 = "1/x^2"
    INV3 = "1/x^3"
    SQRT = "sqrt"
    RSQRT = "1/sqrt"
    LOG = "log"
    EXP = "exp"
    SIN = "sin"
    COS = "cos"
    TAN = "tan"
    TANH = "tanh"
    ABS = "abs"
    SGN = "sgn"
    ARCTAN = "arctan"
    ARCSIN = "arcsin"
    ARCCOS = "arccos"
    ARCTANH = "arctanh"
    GAUSSIAN = "gaussian"


def _guarded(fn: Callable[[np.ndarray], np.ndarray],
             guard: Callable) -> Callable[[np.ndarray], np.ndarray]:
    def wrapped(u: np.ndarray) -> np.ndarray:
        return fn(guard(u)[0])
    return wrapped


@dataclass(frozen=True)
class OperatorForm:
    """A library primitive g_k."""
    id: FormId
    index: int
    domain: Domain
    numpy_fn: Callable[[np.ndarray], np.ndarray]
    tape_fn: Callable[[Var], Var]
    expr_fn: Callable[[expr.Expr], expr.Expr]
    differentiable: bool = True

    def __call__(self, u: np.ndarray) -> np.ndarray:
        with np.errstate(all="ignore"):
            return self.numpy_fn(np.asarray(u, dtype=float))

    def __repr__(self) -> str:
        return f"OperatorForm({self.id.value})"


def _unary(name: str) -> Callable[[expr.Expr], expr.Expr]:
    return lambda u: expr.unary(name, u)


def _pow(n: int) -> Callable[[expr.Expr], expr.Expr]:
    return lambda u: expr.power(u, n)


_DEFS: list[tuple] = [
    (FormId.CONST, Domain.REAL, np.ones_like, lambda u: u * 0.0 + 1.0,
     lambda u: expr.const(1.0)),
    (FormId.ZERO, Domain.REAL, np.zeros_like, lambda u: u * 0.0,
     lambda u: expr.const(0.0)),
    (FormId.IDENTITY, Domain.REAL, lambda u: u, lambda u: u, lambda u: u),
    (FormId.X2, Domain.REAL, lambda u: u**2, lambda u: u**2, _pow(2)),
    (FormId.X3, Domain.REAL, lambda u: u**3, lambda u: u**3, _pow(3)),
    (FormId.X4, Domain.REAL, lambda u: u**4, lambda u: u**4, _pow(4)),
    (FormId.X5, Domain.REAL, lambda u: u**5, lambda u: u**5, _pow(5)),
    (FormId.INV, Domain.NONZERO, _guarded(lambda u: u**-1.0, guard_nonzero),
     lambda u: u**-1, _pow(-1)),
    (FormId.INV2, Domain.NONZERO, _guarded(lambda u: u**-2.0, guard_nonzero),
     lambda u: u**-2, _pow(-2)),
    (FormId.INV3, Domain.NONZERO, _guarded(lambda u: u**-3.0, guard_nonzero),
     lambda u: u**-3, _pow(-3)),
    (FormId.SQRT, Domain.POSITIVE, _guarded(np.sqrt, guard_positive),
     lambda u: u.sqrt(), _unary("sqrt")),
    (FormId.RSQRT, Domain.POSITIVE,
     _guarded(lambda u: u**-0.5, guard_positive), lambda u: u**-0.5,
     lambda u: expr.power(expr.unary("sqrt", u), -1)),
    (FormId.LOG, Domain.POSITIVE, _guarded(np.log, guard_positive),
     lambda u: u.log(), _unary("log")),
    (FormId.EXP, Domain.REAL, np.exp, lambda u: u.exp(), _unary("exp")),
    (FormId.SIN, Domain.REAL, np.sin, lambda u: u.sin(), _unary("sin")),
    (FormId.COS, Domain.REAL, np.cos, lambda u: u.cos(), _unary("cos")),
    (FormId.TAN, Domain.REAL, np.tan, lambda u: u.tan(), _unary("tan")),
    (FormId.TANH, Domain.REAL, np.tanh, lambda u: u.tanh(), _unary("tanh")),
    (FormId.ABS, Domain.REAL, np.abs, lambda u: u.abs(), _unary("abs")),
    (FormId.SGN, Domain.REAL, np.sign, lambda u: u.sign(), _unary("sgn")),
    (FormId.ARCTAN, Domain.REAL, np.arctan, lambda u: u.atan(),
     _unary("arctan")),
    (FormId.ARCSIN, Domain.UNIT, _guarded(np.arcsin, guard_unit),
     lambda u: u.asin(), _unary("arcsin")),
    (FormId.ARCCOS, Domain.UNIT, _guarded(np.arccos, guard_unit),
     lambda u: u.acos(), _unary("arccos")),
    (FormId.ARCTANH, Domain.UNIT, _guarded(np.arctanh, guard_unit),
     lambda u: u.atanh(), _unary("arctanh")),
    (FormId.GAUSSIAN, Domain.REAL, lambda u: np.exp(-u * u),
     lambda u: u.gaussian(), _unary("gauss")),
]

LIBRARY: tuple[OperatorForm, ...] = tuple(
    OperatorForm(
        id=fid, index=i, domain=dom, numpy_fn=np_fn, tape_fn=tape_fn,
        expr_fn=expr_fn, differentiable=fid is not FormId.SGN,
    )
    for i, (fid, dom, np_fn, tape_fn, expr_fn) in enumerate(_DEFS)
)
K = len(LIBRARY)
assert K == 25

_BY_ID = {form.id: form for form in LIBRARY}


def get_form(form_id: FormId | str) -> OperatorForm:
    return _BY_ID[FormId(form_id)]


def library_manifest() -> list[dict[str, object]]:
    """Stable enumeration of the library for run manifests and reports."""
    return [
        {
            "index": f.index,
            "id": f.id.value,
            "domain": f.domain.value,
            "differentiable": f.differentiable,
        }
        for f in LIBRARY
    ]


# ---------------------------------------------------------------------------
# Symbolic edges
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineParams:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.0
    delta: float = 0.0

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError(f"non-finite affine parameters: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma, self.delta])

    @classmethod
    def from_array(cls, values: Sequence[float]) -> AffineParams:
        a, b, g, d = (float(v) for v in values)
        return cls(a, b, g, d)


@dataclass(frozen=True)
class SymbolicEdge:
    """phi(x) = alpha * g(beta * x + gamma) + delta."""
    form: OperatorForm
    affine: AffineParams = AffineParams()

    def __call__(self, x: np.ndarray | float) -> np.ndarray:
        return eval_symbolic(self, x)

    def to_expr(self, arg: expr.Expr) -> expr.Expr:
        a = self.affine
        inner = expr.add(expr.mul(expr.const(a.beta), arg), expr.const(a.gamma))
        outer = expr.mul(expr.const(a.alpha), self.form.expr_fn(inner))
        return expr.add(outer, expr.const(a.delta))


def eval_symbolic(e: SymbolicEdge, x: np.ndarray | float) -> np.ndarray:
    a = e.affine
    u = a.beta * np.asarray(x, dtype=float) + a.gamma
    return a.alpha * e.form(u) + a.delta


# ---------------------------------------------------------------------------
# Local least-squares fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RankedForm:
    form: OperatorForm
    params: AffineParams
    local_mse: float


def _solve_outer(g: np.ndarray, ys: np.ndarray) -> tuple[float, float, float]:
    """Closed-form (alpha, delta) for fixed inner map; returns mse too."""
    if not np.all(np.isfinite(g)):
        return 0.0, 0.0, float("inf")
    design = np.column_stack([g, np.ones_like(g)])
    (alpha, delta), *_ = np.linalg.lstsq(design, ys, rcond=None)
    resid = alpha * g + delta - ys
    mse = float(np.mean(resid * resid))
    return float(alpha), float(delta), mse if np.isfinite(mse) else float("inf")


def _starts(form: OperatorForm, rng: np.random.Generator) -> list[tuple[float, float]]:
    starts = []
    for scale in (1.0, 2.0, 3.0, 0.5):
        for sign in (1.0, -1.0):
            beta = sign * scale
            jitter = 0.1 * float(rng.standard_normal())
            if form.domain is Domain.UNIT:
                beta *= 0.3
                gamma = jitter
            elif form.domain in (Domain.POSITIVE, Domain.NONZERO):
                gamma = abs(beta) + 0.5 + jitter
            else:
                gamma = jitter
            starts.append((beta, gamma))
    return starts


def fit_affine_local(
    form: OperatorForm,
    xs: np.ndarray,
    ys: np.ndarray,
    seed: int = 0,
    starts: int = FIT_STARTS,
    steps: int = FIT_STEPS,
    lr: float = FIT_LR,
) -> tuple[AffineParams, float]:
    """Fit alpha*g(beta*x+gamma)+delta to samples by multi-start Adam.

    The inner (beta, gamma) are optimised on standardised inputs while
    (alpha, delta) are re-solved in closed form at every step.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size < MIN_SAMPLES or xs.shape != ys.shape:
        raise ValueError(f"need at least {MIN_SAMPLES} paired samples")
    if form.id is FormId.ZERO:
        return AffineParams(0.0, 1.0, 0.0, 0.0), float(np.mean(ys * ys))
    if form.id is FormId.CONST:
        return AffineParams(0.0, 1.0, 0.0, float(np.mean(ys))), float(np.var(ys))

    centre = 0.5 * (xs.max() + xs.min())
    half = 0.5 * (xs.max() - xs.min()) or 1.0
    z = (xs - centre) / half
    n = z.size

    def graph(tape, inputs, params):
        return form.tape_fn(params[0] * inputs[0] + params[1])

    rng = np.random.default_rng([seed, form.index])
    best = (float("inf"), 0.0, 1.0, 0.0, 0.0)
    for beta0, gamma0 in _starts(form, rng)[:starts]:
        inner = np.array([beta0, gamma0])
        _, tape = record_forward(graph, z[:, None], inner)
        state = AdamState.for_params(2, lr=lr)
        for _ in range(steps):
            g = tape.replay(inner)
            alpha, delta, mse = _solve_outer(g, ys)
            if not np.isfinite(mse):
                break
            seed_adj = (2.0 / n) * (alpha * g + delta - ys) * alpha
            grad = backward(tape, seed_adj)
            if not np.all(np.isfinite(grad)):
                break
            inner = adam_step(inner, grad, state)
        g = form(inner[0] * z + inner[1])
        alpha, delta, mse = _solve_outer(g, ys)
        if mse < best[0]:
            best = (mse, alpha, float(inner[0]), float(inner[1]), delta)

    mse, alpha, b, c, delta = best
    if not np.isfinite(mse):
        return AffineParams(), float("inf")
    params = AffineParams(alpha, b / half, c - b * centre / half, delta)
    return params, mse


def rank_forms_locally(
    xs: np.ndarray,
    ys: np.ndarray,
    library: Sequence[OperatorForm] = LIBRARY,
    seed: int = 0,
    **fit_kwargs: int | float,
) -> list[RankedForm]:
    """All candidate fits, ascending by local mse, ties by library order."""
    ranked = []
    for form in library:
        params, mse = fit_affine_local(form, xs, ys, seed=seed, **fit_kwargs)
        ranked.append(RankedForm(form, params, mse))
        logger.debug("local fit %s: mse=%.3e", form.id.value, mse)
    ranked.sort(key=lambda r: (r.local_mse, r.form.index))
    return ranked
