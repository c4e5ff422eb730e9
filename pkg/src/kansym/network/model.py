"""The MultKAN model: layered edge matrices, importance, pruning and snapshots.

Layer 0 maps the ``d`` inputs into ``width + 2 * n_mult`` summation sub-nodes.
The first ``width`` sub-nodes are additive hidden units; every further pair of
sub-nodes feeds one multiplication unit whose output is the product of the two
sums. Layer 1 maps the ``width + n_mult`` hidden units into the scalar output.
"""

from __future__ import annotations

import copy
import logging
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from kansym.basis import RbfBasis, SplineBasis, fit_grid_range
from kansym.errors import InvalidRunError, RunFailure
from kansym.network.edges import (
    NUMERIC_KINDS,
    BasisEdge,
    EdgeFunction,
    EdgeId,
    EdgeKind,
    PrunedEdge,
)

if TYPE_CHECKING:
    from kansym.diffengine import Tape, Var

logger = logging.getLogger(__name__)

EdgeFactory = Callable[[float, float, np.random.Generator], EdgeFunction]

REFIT_POINTS = 64


@dataclass
class KanLayer:
    """One edge matrix; ``edges[j][i]`` maps input ``i`` into sub-node ``j``."""
    edges: list[list[EdgeFunction]]

    @property
    def n_out(self) -> int:
        return len(self.edges)

    @property
    def n_in(self) -> int:
        return len(self.edges[0]) if self.edges else 0


@dataclass
class ModelGraph:
    """Tape handles produced by :meth:`KanModel.build`."""
    prediction: Var
    edge_outputs: dict[EdgeId, Var]
    edge_params: dict[EdgeId, list[Var]]


@dataclass
class ModelTrace:
    """Numpy evaluation with every intermediate kept."""
    prediction: np.ndarray
    hidden: np.ndarray
    edge_inputs: dict[EdgeId, np.ndarray]
    edge_outputs: dict[EdgeId, np.ndarray]


@dataclass
class EdgeImportance:
    """Layer-normalised mean |phi_e| per edge; pruned edges score 0."""
    scores: dict[EdgeId, float]

    def __getitem__(self, edge: EdgeId) -> float:
        return self.scores.get(edge, 0.0)

    def ranked(self, candidates: set[EdgeId] | None = None) -> list[EdgeId]:
        """Edges by decreasing score, ties broken by edge id."""
        pool = self.scores if candidates is None else candidates
        return sorted(pool, key=lambda e: (-self[e], e))


@dataclass
class Snapshot:
    layers: list[KanLayer]
    hidden_mask: np.ndarray
    flagged: frozenset[EdgeId] = field(default_factory=frozenset)


class KanModel:
    """Two-layer MultKAN with additive and multiplication hidden units."""

    def __init__(self, n_inputs: int, width: int, n_mult: int,
                 layers: list[KanLayer],
                 hidden_mask: np.ndarray | None = None) -> None:
        self.n_inputs = n_inputs
        self.width = width
        self.n_mult = n_mult
        self.layers = layers
        self.hidden_mask = (
            np.ones(self.n_hidden, dtype=bool) if hidden_mask is None
            else np.asarray(hidden_mask, dtype=bool)
        )
        self.flagged: set[EdgeId] = set()
        self._check_shape()

    @classmethod
    def create(cls, train_inputs: np.ndarray, width: int, n_mult: int,
               edge_factory: EdgeFactory,
               rng: np.random.Generator) -> KanModel:
        """Build a fresh model whose grids cover the observed activations.

        Layer-0 edges share the global input range; each layer-1 edge gets
        the range of the hidden unit feeding it under the initial weights.
        """
        x = np.asarray(train_inputs, dtype=float)
        d = x.shape[1]
        lo, hi = fit_grid_range(x)
        n_sub = width + 2 * n_mult
        first = KanLayer([
            [edge_factory(lo, hi, rng) for _ in range(d)] for _ in range(n_sub)
        ])
        placeholder = KanLayer([[PrunedEdge() for _ in range(width + n_mult)]])
        model = cls(d, width, n_mult, [first, placeholder])
        hidden = model.trace(x).hidden
        model.layers[1] = KanLayer([[
            edge_factory(*fit_grid_range(hidden[:, h]), rng)
            for h in range(model.n_hidden)
        ]])
        return model

    def _check_shape(self) -> None:
        if len(self.layers) != 2:
            raise ValueError("a MultKAN has exactly two edge layers")
        first, second = self.layers
        if first.n_out != self.n_sub or first.n_in != self.n_inputs:
            raise ValueError("layer 0 does not match the model width")
        if second.n_out != 1 or second.n_in != self.n_hidden:
            raise ValueError("layer 1 does not match the model width")

    # ------------------------------------------------------------------
    # Structure
    # ------------------------------------------------------------------

    @property
    def n_hidden(self) -> int:
        return self.width + self.n_mult

    @property
    def n_sub(self) -> int:
        return self.width + 2 * self.n_mult

    def unit_subnodes(self, unit: int) -> tuple[int, ...]:
        if unit < self.width:
            return (unit,)
        first = self.width + 2 * (unit - self.width)
        return (first, first + 1)

    def edge(self, eid: EdgeId) -> EdgeFunction:
        layer, j, i = eid
        return self.layers[layer].edges[j][i]

    def set_edge(self, eid: EdgeId, fn: EdgeFunction) -> None:
        layer, j, i = eid
        self.layers[layer].edges[j][i] = fn

    def edge_ids(self) -> Iterator[EdgeId]:
        for layer_idx, layer in enumerate(self.layers):
            for j, row in enumerate(layer.edges):
                for i in range(len(row)):
                    yield (layer_idx, j, i)

    def active_edges(self, kinds: frozenset[EdgeKind] | None = None) -> list[EdgeId]:
        out = []
        for eid in self.edge_ids():
            kind = self.edge(eid).kind
            if kind is EdgeKind.PRUNED:
                continue
            if kinds is None or kind in kinds:
                out.append(eid)
        return out

    def numeric_edges(self) -> list[EdgeId]:
        return self.active_edges(NUMERIC_KINDS)

    # ------------------------------------------------------------------
    # Parameters
    # ------------------------------------------------------------------

    def parameter_slices(self) -> dict[EdgeId, slice]:
        slices, start = {}, 0
        for eid in self.edge_ids():
            n = self.edge(eid).n_params()
            slices[eid] = slice(start, start + n)
            start += n
        return slices

    def n_parameters(self) -> int:
        return sum(self.edge(eid).n_params() for eid in self.edge_ids())

    def get_parameters(self) -> np.ndarray:
        chunks = [self.edge(eid).get_params() for eid in self.edge_ids()]
        return np.concatenate(chunks) if chunks else np.zeros(0)

    def set_parameters(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        if values.size != self.n_parameters():
            raise ValueError(
                f"expected {self.n_parameters()} parameters, got {values.size}"
            )
        for eid, sl in self.parameter_slices().items():
            self.edge(eid).set_params(values[sl])

    # ------------------------------------------------------------------
    # Evaluation
    # ------------------------------------------------------------------

    def _combine(self, sums: list) -> list:
        units = list(sums[:self.width])
        for u in range(self.n_mult):
            a, b = self.unit_subnodes(self.width + u)
            units.append(sums[a] * sums[b])
        return units

    def trace(self, x: np.ndarray) -> ModelTrace:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.n_inputs:
            raise ValueError(
                f"expected {self.n_inputs} input columns, got {x.shape[1]}"
            )
        n = x.shape[0]
        edge_inputs: dict[EdgeId, np.ndarray] = {}
        edge_outputs: dict[EdgeId, np.ndarray] = {}
        columns = list(x.T)
        hidden = np.zeros((n, self.n_hidden))
        prediction = np.zeros(n)
        for layer_idx, layer in enumerate(self.layers):
            sums = []
            for j, row in enumerate(layer.edges):
                total = np.zeros(n)
                for i, fn in enumerate(row):
                    if fn.kind is EdgeKind.PRUNED:
                        continue
                    eid = (layer_idx, j, i)
                    edge_inputs[eid] = columns[i]
                    out = np.broadcast_to(fn.evaluate(columns[i]), (n,))
                    edge_outputs[eid] = out
                    total = total + out
                sums.append(total)
            if layer_idx == 0:
                columns = self._combine(sums)
                hidden = np.column_stack(columns) if columns else hidden
            else:
                prediction = sums[0]
        return ModelTrace(prediction, hidden, edge_inputs, edge_outputs)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.trace(x).prediction

    def build(self, tape: Tape, xs: list[Var], params: list[Var]) -> ModelGraph:
        """Record the model on ``tape``; ``params`` follow get_parameters order."""
        if len(params) != self.n_parameters():
            raise ValueError("parameter leaves do not match the model")
        cursor = iter(params)
        edge_outputs: dict[EdgeId, Var] = {}
        edge_params: dict[EdgeId, list[Var]] = {}
        columns: list[Var] = list(xs)
        prediction: Var = tape.const(0.0)
        for layer_idx, layer in enumerate(self.layers):
            sums = []
            for j, row in enumerate(layer.edges):
                terms = []
                for i, fn in enumerate(row):
                    own = [next(cursor) for _ in range(fn.n_params())]
                    if fn.kind is EdgeKind.PRUNED:
                        continue
                    eid = (layer_idx, j, i)
                    out = fn.build(tape, columns[i], own)
                    edge_outputs[eid] = out
                    edge_params[eid] = own
                    terms.append(out)
                sums.append(tape.sum(terms))
            if layer_idx == 0:
                columns = self._combine(sums)
            else:
                prediction = sums[0]
        return ModelGraph(prediction, edge_outputs, edge_params)

    # ------------------------------------------------------------------
    # Importance and pruning
    # ------------------------------------------------------------------

    def edge_importance(self, x: np.ndarray) -> EdgeImportance:
        traced = self.trace(x)
        raw = {eid: 0.0 for eid in self.edge_ids()}
        for eid, out in traced.edge_outputs.items():
            raw[eid] = float(np.mean(np.abs(out)))
        scores = {}
        for layer_idx in range(len(self.layers)):
            ids = [e for e in raw if e[0] == layer_idx]
            top = max((raw[e] for e in ids), default=0.0)
            for e in ids:
                scores[e] = raw[e] / top if top > 0 and np.isfinite(top) else 0.0
        return EdgeImportance(scores)

    def unit_edges(self, unit: int) -> tuple[list[EdgeId], list[EdgeId]]:
        incoming = [
            (0, j, i) for j in self.unit_subnodes(unit)
            for i in range(self.n_inputs)
        ]
        return incoming, [(1, 0, unit)]

    def prune(self, importance: EdgeImportance, node_threshold: float,
              edge_threshold: float = 0.0) -> list[int]:
        """Mask hidden units whose incoming and outgoing scores are all small.

        Returns the units newly pruned. Raises when no unit survives.
        """
        removed = []
        for unit in range(self.n_hidden):
            if not self.hidden_mask[unit]:
                continue
            incoming, outgoing = self.unit_edges(unit)
            max_in = max(importance[e] for e in incoming)
            max_out = max(importance[e] for e in outgoing)
            if max_in < node_threshold and max_out < node_threshold:
                self.hidden_mask[unit] = False
                for eid in incoming + outgoing:
                    self.set_edge(eid, PrunedEdge())
                removed.append(unit)
        if edge_threshold > 0:
            for eid in self.active_edges():
                if importance[eid] < edge_threshold:
                    self.set_edge(eid, PrunedEdge())
        if not self.hidden_mask.any() or not self.active_edges():
            raise InvalidRunError(RunFailure.PRUNED_ALL, "every hidden unit was pruned")
        if removed:
            logger.debug("pruned hidden units %s", removed)
        return removed

    # ------------------------------------------------------------------
    # Snapshots
    # ------------------------------------------------------------------

    def snapshot(self) -> Snapshot:
        return Snapshot(
            layers=copy.deepcopy(self.layers),
            hidden_mask=self.hidden_mask.copy(),
            flagged=frozenset(self.flagged),
        )

    def restore(self, snap: Snapshot) -> None:
        shapes = [(layer.n_out, layer.n_in) for layer in snap.layers]
        if shapes != [(layer.n_out, layer.n_in) for layer in self.layers]:
            raise ValueError("snapshot does not match the model structure")
        self.layers = copy.deepcopy(snap.layers)
        self.hidden_mask = snap.hidden_mask.copy()
        self.flagged = set(snap.flagged)

    def copy(self) -> KanModel:
        return copy.deepcopy(self)

    # ------------------------------------------------------------------
    # Grids
    # ------------------------------------------------------------------

    def refresh_hidden_grids(self, x: np.ndarray) -> int:
        """Re-range layer-1 numeric edges to the observed hidden activations.

        Coefficients are refit so each edge keeps its current shape on the
        new range. Returns the number of edges refreshed.
        """
        hidden = self.trace(x).hidden
        refreshed = 0
        for eid in self.active_edges(NUMERIC_KINDS):
            if eid[0] != 1:
                continue
            edge = self.edge(eid)
            if not isinstance(edge, BasisEdge):
                continue
            column = hidden[:, eid[2]]
            if not np.all(np.isfinite(column)):
                continue
            lo, hi = fit_grid_range(column)
            if (lo, hi) == edge.input_range:
                continue
            basis = _rebased(edge.basis, lo, hi)
            xs = np.concatenate([column, np.linspace(lo, hi, REFIT_POINTS)])
            basis.fit(xs, edge.evaluate(xs))
            self.set_edge(eid, BasisEdge(basis))
            refreshed += 1
        return refreshed

    def __repr__(self) -> str:
        return (
            f"KanModel(d={self.n_inputs}, width=[{self.width}, {self.n_mult}], "
            f"active={len(self.active_edges())})"
        )


def _rebased(basis: SplineBasis | RbfBasis, lo: float,
             hi: float) -> SplineBasis | RbfBasis:
    if isinstance(basis, SplineBasis):
        return SplineBasis(lo, hi, resolution=basis.resolution, degree=basis.degree)
    return RbfBasis.uniform(lo, hi, basis.n_basis)
