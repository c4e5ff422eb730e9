"""Symbolic extraction: per-edge AutoSym and greedy in-context regression."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from kansym import expr
from kansym.basis import fit_grid_range
from kansym.data import Dataset, ValidationSplit
from kansym.errors import InvalidRunError, RunFailure
from kansym.network.edges import (
    BasisEdge,
    EdgeId,
    EdgeKind,
    SymbolicEdgeFunction,
)
from kansym.network.model import KanModel
from kansym.network.train import Deadline, TrainConfig, fit, mse
from kansym.oplib import (
    LIBRARY,
    FormId,
    OperatorForm,
    fit_affine_local,
    get_form,
    rank_forms_locally,
)

logger = logging.getLogger(__name__)

SAMPLE_POINTS = 64
POLISH_STEPS = 200


class GsrConfig(BaseModel):
    """Budget and candidate pool for greedy in-context conversion."""
    model_config = ConfigDict(frozen=True)

    tau: int = Field(100, ge=0)
    max_edges: int | None = Field(None, ge=1)
    library: list[FormId] | None = None
    post_commit: bool = True
    amortise_importance: bool = False
    workers: int = Field(1, ge=1)
    verify_restore: bool = False

    def candidates(self) -> list[OperatorForm]:
        if self.library is None:
            return list(LIBRARY)
        return sorted((get_form(f) for f in set(self.library)), key=lambda f: f.index)


@dataclass
class TrialRecord:
    edge: EdgeId
    form: FormId
    loss: float
    committed: bool = False
    wall_ms: float = 0.0


@dataclass
class ExtractResult:
    model: KanModel
    expression: expr.Expr
    flagged: list[EdgeId] = field(default_factory=list)

    @property
    def text(self) -> str:
        return expr.to_text(self.expression)


@dataclass
class GsrResult(ExtractResult):
    trials: list[TrialRecord] = field(default_factory=list)
    steps: int = 0


def edge_seed(seed: int, eid: EdgeId, form: OperatorForm | None = None) -> int:
    """Stable integer stream id for one edge (and candidate form)."""
    key = [seed, *eid] + ([form.index] if form is not None else [])
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def edge_samples(model: KanModel, eid: EdgeId, x: np.ndarray | None = None,
                 points: int = SAMPLE_POINTS) -> tuple[np.ndarray, np.ndarray]:
    """The edge function sampled on a uniform grid over its input range.

    Numeric edges use their grid range; other edges need ``x`` to observe
    the range of the activations feeding them.
    """
    edge = model.edge(eid)
    if isinstance(edge, BasisEdge):
        lo, hi = edge.input_range
    elif x is not None:
        lo, hi = fit_grid_range(model.trace(x).edge_inputs[eid])
    else:
        raise ValueError(f"edge {eid} has no numeric input range")
    xs = np.linspace(lo, hi, points)
    return xs, np.asarray(edge.evaluate(xs), dtype=float)


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------


def _edge_expr(model: KanModel, eid: EdgeId, arg: expr.Expr) -> expr.Expr | None:
    edge = model.edge(eid)
    if edge.kind is EdgeKind.PRUNED:
        return None
    if isinstance(edge, SymbolicEdgeFunction):
        return edge.as_symbolic().to_expr(arg)
    return expr.opaque(f"phi[{':'.join(map(str, eid))}]", arg)


def compose_expression(model: KanModel, simplify: bool = True) -> expr.Expr:
    """Closed form of the model; unconverted edges become opaque leaves."""
    inputs = [expr.var(i + 1) for i in range(model.n_inputs)]
    sums = []
    for j in range(model.n_sub):
        terms = [_edge_expr(model, (0, j, i), inputs[i]) for i in range(model.n_inputs)]
        sums.append(expr.add(*(t for t in terms if t is not None)))
    hidden = list(sums[:model.width])
    for u in range(model.n_mult):
        a, b = model.unit_subnodes(model.width + u)
        hidden.append(expr.mul(sums[a], sums[b]))
    terms = [_edge_expr(model, (1, 0, h), hidden[h]) for h in range(model.n_hidden)]
    out = expr.add(*(t for t in terms if t is not None))
    return expr.simplify(out) if simplify else out


# ---------------------------------------------------------------------------
# AutoSym
# ---------------------------------------------------------------------------


def autosym(model: KanModel, dataset: Dataset, train: TrainConfig,
            polish_steps: int = POLISH_STEPS, points: int = SAMPLE_POINTS,
            deadline: Deadline | None = None) -> ExtractResult:
    """Replace each numeric edge by its best local fit, then polish.

    Edges whose every candidate fails stay numeric and are flagged.
    """
    work = model.copy()
    flagged = []
    for eid in work.numeric_edges():
        xs, ys = edge_samples(work, eid, points=points)
        ranked = rank_forms_locally(xs, ys, seed=edge_seed(train.seed, eid))
        best = ranked[0]
        if not np.isfinite(best.local_mse):
            logger.warning("edge %s: no finite local fit, left numeric", eid)
            work.flagged.add(eid)
            flagged.append(eid)
            continue
        work.set_edge(eid, SymbolicEdgeFunction(best.form, best.params))
        logger.debug("edge %s -> %s (local mse %.3e)", eid, best.form.id.value,
                     best.local_mse)
    split = dataset.split_validation(train.val_fraction, train.seed)
    fit(work, split.x_fit, split.y_fit, polish_steps, train.lr, deadline=deadline)
    return ExtractResult(work, compose_expression(work), flagged)


# ---------------------------------------------------------------------------
# Greedy in-context symbolic regression
# ---------------------------------------------------------------------------


Samples = tuple[np.ndarray, np.ndarray]


@dataclass
class _Context:
    split: ValidationSplit
    cfg: GsrConfig
    train: TrainConfig
    deadline: Deadline | None = None


@dataclass
class _Trial:
    record: TrialRecord
    model: KanModel | None


def _candidate(model: KanModel, eid: EdgeId, form: OperatorForm,
               samples: Samples | None, seed: int) -> SymbolicEdgeFunction:
    current = model.edge(eid)
    if isinstance(current, SymbolicEdgeFunction) and current.form.id is form.id:
        return SymbolicEdgeFunction(form, current.affine)
    if samples is None:
        return SymbolicEdgeFunction(form)
    params, local = fit_affine_local(form, *samples, seed=edge_seed(seed, eid, form))
    if not np.isfinite(local):
        return SymbolicEdgeFunction(form)
    return SymbolicEdgeFunction(form, params)


def _score(model: KanModel, eid: EdgeId, form: OperatorForm,
           samples: Samples | None, ctx: _Context) -> TrialRecord:
    """Substitute, fine-tune and score in place."""
    start = time.perf_counter()
    model.set_edge(eid, _candidate(model, eid, form, samples, ctx.train.seed))
    try:
        if ctx.cfg.tau:
            fit(model, ctx.split.x_fit, ctx.split.y_fit, ctx.cfg.tau, ctx.train.lr,
                deadline=ctx.deadline)
        loss = mse(model, ctx.split.x_val, ctx.split.y_val)
    except InvalidRunError as e:
        if e.reason is RunFailure.TIMEOUT:
            raise
        loss = float("inf")
    if not np.isfinite(loss):
        loss = float("inf")
    wall = (time.perf_counter() - start) * 1e3
    return TrialRecord(eid, form.id, loss, wall_ms=wall)


def _trial_on_copy(base: KanModel, eid: EdgeId, form: OperatorForm,
                   samples: Samples | None, ctx: _Context) -> _Trial:
    model = base.copy()
    return _Trial(_score(model, eid, form, samples, ctx), model)


def _run_trials(model: KanModel, eid: EdgeId, forms: list[OperatorForm],
                samples: Samples | None,
                ctx: _Context) -> tuple[list[TrialRecord], KanModel | None]:
    """Evaluate every candidate; return logs and the winning trial's model."""
    if ctx.cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=ctx.cfg.workers) as pool:
            futures = [
                pool.submit(_trial_on_copy, model, eid, f, samples, ctx)
                for f in forms
            ]
            trials = [fut.result() for fut in futures]
        records = [t.record for t in trials]
        winner = _winner(records)
        return records, None if winner is None else trials[winner].model

    records: list[TrialRecord] = []
    best_state = None
    snap = model.snapshot()
    before = model.get_parameters() if ctx.cfg.verify_restore else None
    for form in forms:
        records.append(_score(model, eid, form, samples, ctx))
        if _winner(records) == len(records) - 1:
            best_state = model.snapshot()
        model.restore(snap)
        if before is not None and not np.array_equal(model.get_parameters(), before):
            raise RuntimeError(f"restore after trial on {eid} changed parameters")
    if best_state is None:
        return records, None
    winner = model.copy()
    winner.restore(best_state)
    return records, winner


def _winner(records: list[TrialRecord]) -> int | None:
    finite = [
        (r.loss, get_form(r.form).index, n)
        for n, r in enumerate(records) if np.isfinite(r.loss)
    ]
    return min(finite)[2] if finite else None


def gsr(model: KanModel, dataset: Dataset, cfg: GsrConfig, train: TrainConfig,
        candidate_sets: dict[EdgeId, list[FormId]] | None = None,
        deadline: Deadline | None = None) -> GsrResult:
    """Convert edges one at a time, most important first.

    Every candidate form is substituted, the whole model fine-tuned for
    ``tau`` steps and scored on the validation rows; the argmin is kept.
    ``candidate_sets`` restricts both the eligible edges and their forms.
    """
    work = model.copy()
    ctx = _Context(dataset.split_validation(train.val_fraction, train.seed),
                   cfg, train, deadline)
    x_fit, y_fit = ctx.split.x_fit, ctx.split.y_fit
    if candidate_sets is not None:
        eligible = [e for e in candidate_sets
                    if work.edge(e).kind is not EdgeKind.PRUNED]
    else:
        eligible = work.numeric_edges()
    limit = min(cfg.max_edges or len(eligible), len(eligible))
    pending = set(eligible)
    trials: list[TrialRecord] = []
    flagged: list[EdgeId] = []
    steps = 0
    importance = work.edge_importance(x_fit)
    for _ in range(limit):
        if not pending:
            break
        if not cfg.amortise_importance:
            importance = work.edge_importance(x_fit)
        eid = importance.ranked(pending)[0]
        pending.discard(eid)
        if candidate_sets is not None:
            forms = sorted((get_form(f) for f in set(candidate_sets[eid])),
                           key=lambda f: f.index)
        else:
            forms = cfg.candidates()
        samples: Samples | None = edge_samples(work, eid, x_fit)
        if not np.all(np.isfinite(samples[1])):
            samples = None
        records, winner = _run_trials(work, eid, forms, samples, ctx)
        steps += cfg.tau * len(forms)
        trials.extend(records)
        best = _winner(records)
        if best is None or winner is None:
            logger.warning("edge %s: every candidate diverged, left as is", eid)
            work.flagged.add(eid)
            flagged.append(eid)
            continue
        records[best].committed = True
        work = winner
        logger.debug("edge %s committed %s (J=%.4e)", eid, records[best].form.value,
                     records[best].loss)
        if cfg.post_commit and cfg.tau:
            snap = work.snapshot()
            try:
                fit(work, x_fit, y_fit, cfg.tau, train.lr, deadline=deadline)
            except InvalidRunError as e:
                if e.reason is RunFailure.TIMEOUT:
                    raise
                work.restore(snap)
            steps += cfg.tau
    return GsrResult(work, compose_expression(work), flagged, trials, steps)


def write_trial_log(trials: list[TrialRecord], path: str | Path,
                    run_id: str = "", timing: bool = True) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "edge", "form", "loss", "committed", "wall_ms"])
        for t in trials:
            writer.writerow([
                run_id, ":".join(map(str, t.edge)), t.form.value, f"{t.loss:.10g}",
                int(t.committed), f"{t.wall_ms:.1f}" if timing else "0",
            ])
    return path
