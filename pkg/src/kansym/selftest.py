"""Built-in numerical oracles run by ``kansym selftest``."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from kansym.basis import SplineBasis
from kansym.diffengine import (
    Graph,
    Tape,
    Var,
    backward,
    finite_difference,
    gradient_error,
    record_forward,
)
from kansym.gates import GatedEdge
from kansym.network.edges import BasisEdge
from kansym.network.model import KanModel
from kansym.stats import cliffs_delta, holm_adjust, mwu_one_sided, reduction_pct

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-4
_UNARY = ("sin", "cos", "tanh", "asinh", "atan", "gaussian")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _random_graph(rng: np.random.Generator, n_params: int, depth: int) -> Graph:
    plan = [(rng.choice(["unary", "add", "mul"]), str(rng.choice(_UNARY)),
             int(rng.integers(n_params))) for _ in range(depth)]

    def graph(tape: Tape, xs: list[Var], ps: list[Var]) -> Var:
        acc = xs[0] * ps[0] + ps[-1]
        for kind, fn, k in plan:
            if kind == "unary":
                acc = getattr(acc, fn)()
            elif kind == "add":
                acc = acc + ps[k] * xs[k % len(xs)]
            else:
                acc = acc * ps[k].tanh()
        return acc.mean()
    return graph


def check_random_graphs(n_graphs: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_graphs):
        n_params = int(rng.integers(2, 5))
        graph = _random_graph(rng, n_params, int(rng.integers(2, 7)))
        x = rng.uniform(-1.0, 1.0, size=(5, 2))
        p = rng.uniform(-1.0, 1.0, size=n_params)
        _, tape = record_forward(graph, x, p)
        worst = max(worst, gradient_error(backward(tape),
                                          finite_difference(graph, x, p)))
    return CheckResult("gradient: random graphs", worst < GRADIENT_TOLERANCE,
                       f"max relative error {worst:.2e} over {n_graphs} graphs")


def _model_loss(model: KanModel, y: np.ndarray) -> Graph:
    def graph(tape: Tape, xs: list[Var], ps: list[Var]) -> Var:
        resid = model.build(tape, xs, ps).prediction - y
        return (resid * resid).mean()
    return graph


def _directional_error(graph: Graph, x: np.ndarray, p: np.ndarray,
                       rng: np.random.Generator, directions: int = 5,
                       h: float = 1e-6) -> float:
    _, tape = record_forward(graph, x, p)
    grad = backward(tape)
    worst = 0.0
    for _ in range(directions):
        v = rng.standard_normal(p.size)
        v /= np.linalg.norm(v)
        up, _ = record_forward(graph, x, p + h * v)
        down, _ = record_forward(graph, x, p - h * v)
        numeric = (float(up) - float(down)) / (2.0 * h)
        worst = max(worst, gradient_error(np.array([grad @ v]), np.array([numeric])))
    return worst


def check_models(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(16, 2))
    y = np.sin(x[:, 0]) + x[:, 1] ** 2
    factories: dict[str, Callable[[float, float, np.random.Generator], object]] = {
        "spline": lambda lo, hi, r: BasisEdge(_init_spline(lo, hi, r)),
        "gated": lambda lo, hi, r: GatedEdge.init(lo, hi, r),
    }
    details, ok = [], True
    for name, factory in factories.items():
        model = KanModel.create(x, 3, 1, factory,  # type: ignore[arg-type]
                                np.random.default_rng([seed, 1]))
        err = _directional_error(_model_loss(model, y), x,
                                 model.get_parameters(), rng)
        ok &= err < GRADIENT_TOLERANCE
        details.append(f"{name} {err:.2e}")
    return CheckResult("gradient: KAN models", ok, ", ".join(details))


def _init_spline(lo: float, hi: float, rng: np.random.Generator) -> SplineBasis:
    basis = SplineBasis(lo, hi, resolution=8, degree=3)
    basis.init_default(rng)
    return basis


def de_boor(knots: np.ndarray, coefficients: np.ndarray, degree: int,
            x: float) -> float:
    """Textbook de Boor evaluation of a clamped spline at one point."""
    n = coefficients.size
    k = int(np.searchsorted(knots, x, side="right")) - 1
    k = min(max(k, degree), n - 1)
    d = [float(coefficients[j + k - degree]) for j in range(degree + 1)]
    for r in range(1, degree + 1):
        for j in range(degree, r - 1, -1):
            left = knots[j + k - degree]
            right = knots[j + 1 + k - r]
            alpha = 0.0 if right == left else (x - left) / (right - left)
            d[j] = (1.0 - alpha) * d[j - 1] + alpha * d[j]
    return d[degree]


def check_splines(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    basis = SplineBasis(-1.0, 1.0, resolution=8, degree=3,
                        coefficients=rng.standard_normal(11))
    xs = np.linspace(-1.0, 1.0, 1000)
    values, _ = basis.design(xs)
    unity = float(np.max(np.abs(values.sum(axis=1) - 1.0)))
    fast = basis.evaluate(xs)
    oracle = np.array([de_boor(basis.knots, basis.coefficients, 3, x) for x in xs])
    mismatch = float(np.max(np.abs(fast - oracle)))
    passed = unity < 1e-10 and mismatch < 1e-12
    return CheckResult("spline: unity and de Boor", passed,
                       f"unity {unity:.1e}, de Boor {mismatch:.1e}")


def check_stats() -> CheckResult:
    failures = []
    if not np.allclose(holm_adjust([0.01, 0.02, 0.20]), [0.03, 0.04, 0.20]):
        failures.append("holm")
    if not math.isclose(mwu_one_sided([1, 2, 3], [4, 5, 6])[1], 0.05):
        failures.append("mwu exact")
    if not math.isclose(mwu_one_sided([1], [2])[1], 0.5):
        failures.append("mwu single")
    if not math.isclose(cliffs_delta([1, 3], [2, 4]), -0.5):
        failures.append("cliff")
    reduction = reduction_pct(2.12e-2, 9.49e0)
    if reduction is None or round(reduction, 1) != 99.8:
        failures.append("reduction")
    return CheckResult("stats: hand examples", not failures,
                       "ok" if not failures else "failed: " + ", ".join(failures))


def run_selftest(seed: int = 0) -> list[CheckResult]:
    results = [check_random_graphs(seed=seed), check_models(seed),
               check_splines(seed), check_stats()]
    for r in results:
        logger.info("%s: %s (%s)", r.name, "ok" if r.passed else "FAILED", r.detail)
    return results
