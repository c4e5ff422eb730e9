"""Full-batch Adam fitting and the prune-and-refit training schedule."""

from __future__ import annotations

import logging
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from kansym.basis import RbfBasis, SplineBasis
from kansym.data import Dataset
from kansym.diffengine import AdamState, Tape, Var, adam_step, backward, record_forward
from kansym.errors import InvalidRunError, RunFailure
from kansym.network.edges import BasisEdge, EdgeFunction
from kansym.network.model import EdgeImportance, KanModel, ModelGraph

logger = logging.getLogger(__name__)

# Extra loss terms recorded on the training tape (gate regularisers).
Penalty = Callable[[Tape, ModelGraph], Var | None]
CycleHook = Callable[[KanModel, int, EdgeImportance], None]
StepHook = Callable[[int, np.ndarray], None]
FrozenMask = Callable[[KanModel], np.ndarray]


class BasisKind(str, Enum):
    SPLINE = "spline"
    RBF = "rbf"


class TrainConfig(BaseModel):
    """Model shape, optimiser budget and schedule for one training run."""
    model_config = ConfigDict(frozen=True)

    width: int = Field(5, ge=1)
    n_mult: int = Field(2, ge=0)
    lam: float = Field(1e-2, ge=0.0)
    cycles: int = Field(3, ge=0)
    seed: int = 1
    steps: int = Field(200, ge=0)
    lr: float = Field(1e-2, gt=0.0)
    grid: int = Field(20, ge=1)
    degree: int = Field(3, ge=0)
    basis: BasisKind = BasisKind.SPLINE
    init_noise: float = Field(0.1, ge=0.0)
    node_threshold: float = Field(0.1, ge=0.0)
    edge_threshold: float = Field(0.0, ge=0.0)
    val_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    refresh_grids: bool = True
    time_limit: float | None = Field(None, gt=0.0)

    @model_validator(mode="after")
    def _rbf_needs_two(self) -> TrainConfig:
        if self.basis is BasisKind.RBF and self.grid < 2:
            raise ValueError("an RBF grid needs at least two centres")
        return self


@dataclass
class Deadline:
    """Wall-clock budget shared by every stage of one run."""
    seconds: float | None = None
    start: float = field(default_factory=time.monotonic)

    def expired(self) -> bool:
        return self.seconds is not None and time.monotonic() - self.start > self.seconds

    def check(self) -> None:
        if self.expired():
            raise InvalidRunError(RunFailure.TIMEOUT, f"exceeded {self.seconds:g}s")


@dataclass
class FitReport:
    steps: int
    initial_loss: float
    final_loss: float


@dataclass
class StageReport:
    name: str
    lam: float
    fit: FitReport
    pruned: list[int] = field(default_factory=list)


@dataclass
class ScheduleReport:
    stages: list[StageReport] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.stages[-1].fit.final_loss if self.stages else float("nan")

    @property
    def total_steps(self) -> int:
        return sum(s.fit.steps for s in self.stages)


def _check_finite(value: np.ndarray | float, what: str) -> None:
    if not np.all(np.isfinite(value)):
        raise InvalidRunError(RunFailure.NON_FINITE_LOSS, f"non-finite {what}")


def activation_l1(tape: Tape, graph: ModelGraph) -> Var:
    """Sum over active edges of mean |phi_e(x)|."""
    return tape.sum([out.abs().mean() for out in graph.edge_outputs.values()])


def fit(
    model: KanModel,
    x: np.ndarray,
    y: np.ndarray,
    steps: int,
    lr: float = 1e-2,
    lam: float = 0.0,
    penalty: Penalty | None = None,
    deadline: Deadline | None = None,
    frozen: np.ndarray | None = None,
    on_step: StepHook | None = None,
) -> FitReport:
    """Run ``steps`` Adam updates on mse + lam * activation-L1 + penalty.

    The objective is recorded once and replayed with new parameter values
    at every step. Raises InvalidRunError on a non-finite loss or gradient.
    """
    y = np.asarray(y, dtype=float)
    params = model.get_parameters()

    def graph(tape: Tape, xs: list[Var], ps: list[Var]) -> Var:
        g = model.build(tape, xs, ps)
        diff = g.prediction - y
        terms = [(diff * diff).mean()]
        if lam > 0:
            terms.append(lam * activation_l1(tape, g))
        if penalty is not None:
            extra = penalty(tape, g)
            if extra is not None:
                terms.append(extra)
        return tape.sum(terms)

    value, tape = record_forward(graph, x, params)
    _check_finite(value, "loss")
    initial = float(value)
    if steps == 0 or params.size == 0:
        return FitReport(0, initial, initial)
    state = AdamState.for_params(params.size, lr=lr, frozen=frozen)
    for step in range(steps):
        if step:
            value = tape.replay(params)
            _check_finite(value, "loss")
        grad = backward(tape)
        _check_finite(grad, "gradient")
        params = adam_step(params, grad, state)
        if deadline is not None:
            deadline.check()
        if on_step is not None:
            on_step(step, params)
    value = tape.replay(params)
    _check_finite(value, "loss")
    model.set_parameters(params)
    return FitReport(steps, initial, float(value))


def mse(model: KanModel, x: np.ndarray, y: np.ndarray) -> float:
    with np.errstate(all="ignore"):
        resid = model.forward(x) - np.asarray(y, dtype=float)
        return float(np.mean(resid * resid))


def train_schedule(
    model: KanModel,
    dataset: Dataset,
    config: TrainConfig,
    penalty: Penalty | None = None,
    on_cycle: CycleHook | None = None,
    deadline: Deadline | None = None,
    on_step: StepHook | None = None,
    frozen_mask: FrozenMask | None = None,
) -> ScheduleReport:
    """Initial fit, ``cycles`` regularised prune-and-refit rounds, final fit.

    Only the fitting part of the training split is used; the validation
    rows stay unseen so later extraction can score against them.
    """
    split = dataset.split_validation(config.val_fraction, config.seed)
    x, y = split.x_fit, split.y_fit
    deadline = deadline or Deadline(config.time_limit)
    report = ScheduleReport()

    def stage(name: str, lam: float) -> StageReport:
        if config.refresh_grids:
            model.refresh_hidden_grids(x)
        frozen = frozen_mask(model) if frozen_mask is not None else None
        result = fit(model, x, y, config.steps, config.lr, lam=lam,
                     penalty=penalty, deadline=deadline, frozen=frozen,
                     on_step=on_step)
        logger.info("%s: stage %s loss %.4e -> %.4e", dataset.name, name,
                    result.initial_loss, result.final_loss)
        entry = StageReport(name, lam, result)
        report.stages.append(entry)
        return entry

    stage("initial", 0.0)
    for cycle in range(config.cycles):
        entry = stage(f"cycle-{cycle + 1}", config.lam)
        importance = model.edge_importance(x)
        entry.pruned = model.prune(importance, config.node_threshold,
                                   config.edge_threshold)
        if on_cycle is not None:
            on_cycle(model, cycle, importance)
    stage("final", 0.0)
    return report


def basis_factory(config: TrainConfig) -> Callable[[float, float, np.random.Generator],
                                                   EdgeFunction]:
    def make(lo: float, hi: float, rng: np.random.Generator) -> EdgeFunction:
        if config.basis is BasisKind.RBF:
            basis: SplineBasis | RbfBasis = RbfBasis.uniform(lo, hi, config.grid)
        else:
            basis = SplineBasis(lo, hi, resolution=config.grid, degree=config.degree)
        basis.init_default(rng, noise=config.init_noise)
        return BasisEdge(basis)
    return make


def create_numeric_model(dataset: Dataset, config: TrainConfig) -> KanModel:
    """Fresh spline or RBF MultKAN seeded from ``config.seed``."""
    rng = np.random.default_rng([config.seed, 0])
    return KanModel.create(dataset.x_train, config.width, config.n_mult,
                           basis_factory(config), rng)
