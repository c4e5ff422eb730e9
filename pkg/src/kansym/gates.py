"""Gated operator edges: softmax mixtures over the library with top-k pruning.

A gated edge computes ``sum_k pi_k * s * asinh(z_k / s)`` with
``z_k = alpha_k * g_k(beta_k * x + gamma_k) + delta_k`` and ``pi`` a softmax
over the still-active operators. Training adds entropy and L1 penalties on the
gate logits; pruning cycles shrink each edge to its top-k operators until the
edge is discretised to its most probable operator.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from kansym.data import Dataset
from kansym.diffengine import Tape, Var
from kansym.extract import GsrConfig, GsrResult, gsr
from kansym.network.edges import EdgeId, EdgeKind, SymbolicEdgeFunction
from kansym.network.model import EdgeImportance, KanModel, ModelGraph
from kansym.network.train import (
    Deadline,
    ScheduleReport,
    TrainConfig,
    train_schedule,
)
from kansym.oplib import LIBRARY, AffineParams, Domain, FormId, OperatorForm

logger = logging.getLogger(__name__)

INIT_JITTER = 0.1


def compress(z: np.ndarray | float, s: np.ndarray | float) -> np.ndarray:
    """Scaled asinh: linear near zero, logarithmic in the tails."""
    return s * np.arcsinh(np.asarray(z, dtype=float) / s)


def _softmax(logits: np.ndarray, active: np.ndarray) -> np.ndarray:
    pi = np.zeros_like(logits)
    if not active.any():
        return pi
    shifted = logits[active] - logits[active].max()
    weights = np.exp(shifted)
    pi[active] = weights / weights.sum()
    return pi


def init_affine(form: OperatorForm, lo: float, hi: float,
                rng: np.random.Generator) -> AffineParams:
    """Map [lo, hi] onto the operator's comfortable domain, with jitter."""
    centre = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) or 1.0
    scale, shift = 1.0, 0.0
    if form.domain is Domain.UNIT:
        scale = 0.9
    elif form.domain in (Domain.POSITIVE, Domain.NONZERO):
        shift = 1.5
    beta = scale / half * (1.0 + INIT_JITTER * float(rng.standard_normal()))
    gamma = shift - beta * centre + INIT_JITTER * float(rng.standard_normal())
    return AffineParams(1.0, beta, gamma, 0.0)


class GatedEdge:
    """Soft selection over the operator library on one edge.

    Parameters are laid out as ``[logits (K), affine (K x 4), log_s]`` where
    ``log_s`` has one entry, or K entries with a per-operator scale.
    """

    kind = EdgeKind.GATED

    def __init__(self, library: Sequence[OperatorForm] = LIBRARY,
                 logits: np.ndarray | None = None,
                 affine: np.ndarray | None = None,
                 log_s: np.ndarray | None = None,
                 active: np.ndarray | None = None) -> None:
        self.library = tuple(library)
        k = len(self.library)
        self.logits = np.zeros(k) if logits is None else np.array(logits, dtype=float)
        self.affine = (
            np.tile(AffineParams().as_array(), (k, 1)) if affine is None
            else np.array(affine, dtype=float).reshape(k, 4)
        )
        self.log_s = np.zeros(1) if log_s is None else np.array(log_s, dtype=float)
        self.active = (np.ones(k, dtype=bool) if active is None
                       else np.array(active, dtype=bool))
        if self.log_s.size not in (1, k):
            raise ValueError("log_s must be shared or one per operator")

    @classmethod
    def init(cls, lo: float, hi: float, rng: np.random.Generator,
             per_operator_scale: bool = False,
             library: Sequence[OperatorForm] = LIBRARY) -> GatedEdge:
        affine = np.array([init_affine(f, lo, hi, rng).as_array() for f in library])
        log_s = np.zeros(len(library) if per_operator_scale else 1)
        return cls(library, affine=affine, log_s=log_s)

    @property
    def n_forms(self) -> int:
        return len(self.library)

    def n_params(self) -> int:
        return self.n_forms * 5 + self.log_s.size

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.logits, self.affine.ravel(), self.log_s])

    def set_params(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        k = self.n_forms
        self.logits = values[:k].copy()
        self.affine = values[k:5 * k].reshape(k, 4).copy()
        self.log_s = values[5 * k:].copy()

    def logit_mask(self) -> np.ndarray:
        """True on the logit entries of the parameter vector."""
        mask = np.zeros(self.n_params(), dtype=bool)
        mask[:self.n_forms] = True
        return mask

    def scale(self, k: int) -> float:
        return float(np.exp(self.log_s[k if self.log_s.size > 1 else 0]))

    @property
    def probabilities(self) -> np.ndarray:
        return _softmax(self.logits, self.active)

    def entropy(self) -> float:
        pi = self.probabilities[self.active]
        pi = pi[pi > 0]
        return float(-(pi * np.log(pi)).sum())

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        pi = self.probabilities
        out = np.zeros_like(x)
        with np.errstate(all="ignore"):
            for k in np.flatnonzero(self.active):
                a, b, g, d = self.affine[k]
                z = a * self.library[k](b * x + g) + d
                out = out + pi[k] * compress(z, self.scale(k))
        return out

    def build(self, tape: Tape, x: Var, params: list[Var]) -> Var:
        k = self.n_forms
        logits, log_s = params[:k], params[5 * k:]
        idx = np.flatnonzero(self.active)
        shift = tape.detached_max([logits[i] for i in idx])
        weights = {i: (logits[i] - shift).exp() for i in idx}
        terms = []
        for i in idx:
            alpha, beta, gamma, delta = params[k + 4 * i:k + 4 * i + 4]
            z = alpha * self.library[i].tape_fn(beta * x + gamma) + delta
            s = log_s[i if len(log_s) > 1 else 0].exp()
            terms.append(weights[i] * (s * (z / s).asinh()))
        return tape.sum(terms) / tape.sum(list(weights.values()))

    def top(self) -> int:
        """Index of the most probable operator (lowest index on ties)."""
        return int(np.argmax(self.probabilities))

    def ranked(self) -> list[int]:
        """Active operator indices by decreasing probability, ties by index."""
        pi = self.probabilities
        return sorted(np.flatnonzero(self.active).tolist(), key=lambda i: (-pi[i], i))

    def __repr__(self) -> str:
        return f"GatedEdge(active={int(self.active.sum())}/{self.n_forms})"


def topk_prune(edge: GatedEdge, k: int) -> GatedEdge:
    """Copy of ``edge`` keeping only its k most probable operators."""
    if k < 1:
        raise ValueError("top-k needs k >= 1")
    keep = edge.ranked()[:k]
    active = np.zeros(edge.n_forms, dtype=bool)
    active[keep] = True
    return GatedEdge(edge.library, edge.logits, edge.affine, edge.log_s, active)


def gated_edges(model: KanModel) -> list[EdgeId]:
    return model.active_edges(frozenset({EdgeKind.GATED}))


def gate_regularizers(model: KanModel) -> tuple[float, float]:
    """(sum of gate entropies, sum of |active logits|) over gated edges."""
    r_ent = r_l1 = 0.0
    for eid in gated_edges(model):
        edge = model.edge(eid)
        assert isinstance(edge, GatedEdge)
        r_ent += edge.entropy()
        r_l1 += float(np.abs(edge.logits[edge.active]).sum())
    return r_ent, r_l1


def _tape_regularizers(tape: Tape, edge: GatedEdge,
                       params: list[Var]) -> tuple[Var, Var]:
    idx = np.flatnonzero(edge.active)
    logits = [params[i] for i in idx]
    shift = tape.detached_max(logits)
    weights = [(v - shift).exp() for v in logits]
    norm = tape.sum(weights)
    # H = log Z - sum_k pi_k * l_k, with the shift cancelling
    weighted = tape.sum([w * (v - shift) for w, v in zip(weights, logits)])
    entropy = norm.log() - weighted / norm
    l1 = tape.sum([v.abs() for v in logits])
    return entropy, l1


# ---------------------------------------------------------------------------
# Configuration and training
# ---------------------------------------------------------------------------


class GmpConfig(BaseModel):
    """Gate penalties, the top-k pruning schedule and refinement switches."""
    model_config = ConfigDict(frozen=True)

    lambda_ent: float = Field(1e-3, ge=0.0)
    lambda_l1: float = Field(1e-2, ge=0.0)
    initial_cap: int = Field(10, ge=1)
    final_k: int = Field(5, ge=1)
    prune_cycles: list[int] | None = None
    refine: bool = True
    per_operator_scale: bool = False
    freeze_gates: bool = False

    @model_validator(mode="after")
    def _caps_ordered(self) -> GmpConfig:
        if not self.final_k <= self.initial_cap <= len(LIBRARY):
            raise ValueError("need final_k <= initial_cap <= library size")
        return self

    def cap_schedule(self, cycles: int) -> dict[int, int]:
        """Cap applied at each pruning cycle, falling linearly to final_k."""
        points = sorted(c for c in (self.prune_cycles if self.prune_cycles is not None
                                    else range(cycles)) if 0 <= c < cycles)
        if not points:
            return {}
        if len(points) == 1:
            return {points[0]: self.final_k}
        span = self.initial_cap - self.final_k
        return {
            c: self.final_k + math.ceil(span * (1.0 - n / (len(points) - 1)))
            for n, c in enumerate(points)
        }


class GateTrajectory:
    """Per-step gate summary rows: step, edge, entropy, top-1 form and mass."""

    def __init__(self, every: int = 1) -> None:
        self.every = max(1, every)
        self.rows: list[tuple[int, str, float, str, float]] = []
        self._step = 0

    def observe(self, model: KanModel, params: np.ndarray) -> None:
        step = self._step
        self._step += 1
        if step % self.every:
            return
        for eid, sl in model.parameter_slices().items():
            edge = model.edge(eid)
            if not isinstance(edge, GatedEdge):
                continue
            k = edge.n_forms
            current = GatedEdge(edge.library, params[sl][:k], edge.affine,
                              edge.log_s, edge.active)
            top = current.top()
            self.rows.append((step, format_edge(eid), current.entropy(),
                              edge.library[top].id.value,
                              float(current.probabilities[top])))

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "edge", "entropy", "top_form", "top_pi"])
            for step, edge, ent, form, pi in self.rows:
                writer.writerow([step, edge, f"{ent:.6g}", form, f"{pi:.6g}"])
        return path


def format_edge(eid: EdgeId) -> str:
    return ":".join(str(p) for p in eid)


@dataclass
class GmpResult:
    model: KanModel
    schedule: ScheduleReport
    trajectory: GateTrajectory | None = None
    caps: dict[int, int] = field(default_factory=dict)


def create_gated_model(dataset: Dataset, config: TrainConfig,
                       gmp: GmpConfig) -> KanModel:
    rng = np.random.default_rng([config.seed, 2])

    def make(lo: float, hi: float, r: np.random.Generator) -> GatedEdge:
        return GatedEdge.init(lo, hi, r, per_operator_scale=gmp.per_operator_scale)

    return KanModel.create(dataset.x_train, config.width, config.n_mult, make, rng)


def train_gmp(
    dataset: Dataset,
    gmp: GmpConfig,
    config: TrainConfig,
    trajectory: GateTrajectory | None = None,
    deadline: Deadline | None = None,
) -> GmpResult:
    """Train a gated MultKAN on the shared schedule with top-k cap pruning."""
    model = create_gated_model(dataset, config, gmp)
    caps = gmp.cap_schedule(config.cycles)

    def penalty(tape: Tape, graph: ModelGraph) -> Var | None:
        if gmp.lambda_ent == 0 and gmp.lambda_l1 == 0:
            return None
        terms = []
        for eid, params in graph.edge_params.items():
            edge = model.edge(eid)
            if not isinstance(edge, GatedEdge):
                continue
            entropy, l1 = _tape_regularizers(tape, edge, params[:edge.n_forms])
            terms.append(gmp.lambda_ent * entropy + gmp.lambda_l1 * l1)
        return tape.sum(terms) if terms else None

    def on_cycle(m: KanModel, cycle: int, importance: EdgeImportance) -> None:
        cap = caps.get(cycle)
        if cap is None:
            return
        for eid in gated_edges(m):
            edge = m.edge(eid)
            assert isinstance(edge, GatedEdge)
            m.set_edge(eid, topk_prune(edge, cap))
        logger.debug("cycle %d: gate cap %d", cycle + 1, cap)

    def frozen_mask(m: KanModel) -> np.ndarray:
        parts = []
        for eid in m.edge_ids():
            edge = m.edge(eid)
            parts.append(edge.logit_mask() if isinstance(edge, GatedEdge)
                         else np.zeros(edge.n_params(), dtype=bool))
        return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)

    def on_step(step: int, params: np.ndarray) -> None:
        if trajectory is not None:
            trajectory.observe(model, params)

    schedule = train_schedule(
        model, dataset, config, penalty=penalty, on_cycle=on_cycle,
        deadline=deadline,
        on_step=on_step if trajectory is not None else None,
        frozen_mask=frozen_mask if gmp.freeze_gates else None,
    )
    return GmpResult(model, schedule, trajectory, caps)


# ---------------------------------------------------------------------------
# Discretisation and refinement
# ---------------------------------------------------------------------------


@dataclass
class Discretized:
    model: KanModel
    choices: dict[EdgeId, FormId]
    retained: dict[EdgeId, list[FormId]]


def discretize(model: KanModel, final_k: int | None = None) -> Discretized:
    """Replace each gated edge by its argmax operator without compression.

    ``retained`` records each edge's surviving shortlist (capped at
    ``final_k``) for restricted refinement.
    """
    out = model.copy()
    choices: dict[EdgeId, FormId] = {}
    retained: dict[EdgeId, list[FormId]] = {}
    for eid in gated_edges(out):
        edge = out.edge(eid)
        assert isinstance(edge, GatedEdge)
        top = edge.top()
        form = edge.library[top]
        affine = AffineParams.from_array(edge.affine[top])
        out.set_edge(eid, SymbolicEdgeFunction(form, affine))
        choices[eid] = form.id
        ranked = edge.ranked()
        if final_k is not None:
            ranked = ranked[:final_k]
        retained[eid] = [edge.library[i].id for i in ranked]
        logger.debug("edge %s -> %s (pi=%.3f)", format_edge(eid), form.id.value,
                     edge.probabilities[top])
    return Discretized(out, choices, retained)


def refine_restricted(model: KanModel, dataset: Dataset,
                      retained: dict[EdgeId, list[FormId]], cfg: GsrConfig,
                      train: TrainConfig,
                      deadline: Deadline | None = None) -> GsrResult:
    """Greedy in-context refinement limited to each edge's shortlist."""
    sets = {}
    for eid, forms in retained.items():
        current = model.edge(eid)
        ids = list(forms)
        if isinstance(current, SymbolicEdgeFunction) and current.form.id not in ids:
            ids.insert(0, current.form.id)
        sets[eid] = ids
    return gsr(model, dataset, cfg, train, candidate_sets=sets, deadline=deadline)
