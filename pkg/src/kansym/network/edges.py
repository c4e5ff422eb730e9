from __future__ import annotations

from enum import Enum
from typing import TYPE_CHECKING, Protocol, runtime_checkable

import numpy as np

from kansym.basis import RbfBasis, SplineBasis
from kansym.oplib import AffineParams, OperatorForm, SymbolicEdge

if TYPE_CHECKING:
    from kansym.diffengine import Tape, Var

EdgeId = tuple[int, int, int]  # (layer, sub-node, input)


class EdgeKind(str, Enum):
    """Enumeration of edge parametrisations."""
    SPLINE = "spline"
    RBF = "rbf"
    GATED = "gated"
    SYMBOLIC = "symbolic"
    PRUNED = "pruned"


NUMERIC_KINDS = frozenset({EdgeKind.SPLINE, EdgeKind.RBF})


@runtime_checkable
class EdgeFunction(Protocol):
    """A univariate edge with a flat trainable parameter vector."""

    kind: EdgeKind

    def n_params(self) -> int: ...
    def get_params(self) -> np.ndarray: ...
    def set_params(self, values: np.ndarray) -> None: ...
    def build(self, tape: Tape, x: Var, params: list[Var]) -> Var: ...
    def evaluate(self, x: np.ndarray) -> np.ndarray: ...


class BasisEdge:
    """Numeric edge: a spline or RBF expansion with trainable coefficients."""

    def __init__(self, basis: SplineBasis | RbfBasis) -> None:
        self.basis = basis
        self.kind = EdgeKind.SPLINE if isinstance(basis, SplineBasis) else EdgeKind.RBF

    def n_params(self) -> int:
        return self.basis.n_basis

    def get_params(self) -> np.ndarray:
        return self.basis.coefficients.copy()

    def set_params(self, values: np.ndarray) -> None:
        self.basis.coefficients = np.array(values, dtype=float)

    def build(self, tape: Tape, x: Var, params: list[Var]) -> Var:
        return tape.apply("basis", x, *params, attr=self.basis)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return self.basis.evaluate(x)

    @property
    def input_range(self) -> tuple[float, float]:
        return self.basis.lo, self.basis.hi

    def __repr__(self) -> str:
        return f"BasisEdge({self.kind.value}, n={self.n_params()})"


class SymbolicEdgeFunction:
    """Committed symbolic edge with trainable affine wrapper."""

    kind = EdgeKind.SYMBOLIC

    def __init__(self, form: OperatorForm,
                 affine: AffineParams | None = None) -> None:
        self.form = form
        self.params = (affine or AffineParams()).as_array()

    @property
    def affine(self) -> AffineParams:
        return AffineParams.from_array(self.params)

    def as_symbolic(self) -> SymbolicEdge:
        return SymbolicEdge(self.form, self.affine)

    def n_params(self) -> int:
        return 4

    def get_params(self) -> np.ndarray:
        return self.params.copy()

    def set_params(self, values: np.ndarray) -> None:
        self.params = np.array(values, dtype=float)

    def build(self, tape: Tape, x: Var, params: list[Var]) -> Var:
        alpha, beta, gamma, delta = params
        return alpha * self.form.tape_fn(beta * x + gamma) + delta

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        a, b, g, d = self.params
        with np.errstate(all="ignore"):
            return a * self.form(b * np.asarray(x, dtype=float) + g) + d

    def __repr__(self) -> str:
        return f"SymbolicEdgeFunction({self.form.id.value}, {self.affine})"


class PrunedEdge:
    """Removed edge; contributes exactly zero."""

    kind = EdgeKind.PRUNED

    def n_params(self) -> int:
        return 0

    def get_params(self) -> np.ndarray:
        return np.zeros(0)

    def set_params(self, values: np.ndarray) -> None:
        if len(values):
            raise ValueError("pruned edges have no parameters")

    def build(self, tape: Tape, x: Var, params: list[Var]) -> Var:
        return tape.const(0.0)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return np.zeros_like(np.asarray(x, dtype=float))

    def __repr__(self) -> str:
        return "PrunedEdge()"
