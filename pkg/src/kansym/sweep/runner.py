from __future__ import annotations

import itertools
import logging
import time
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from functools import partial
from typing import Protocol, runtime_checkable

import numpy as np

from kansym.data import Dataset, TaskSpec, find_task, sample_dataset
from kansym.errors import InvalidRunError, RunFailure
from kansym.extract import ExtractResult, GsrConfig, autosym, compose_expression, gsr
from kansym.gates import discretize, refine_restricted, train_gmp
from kansym.network.model import KanModel
from kansym.network.train import (
    BasisKind,
    Deadline,
    TrainConfig,
    create_numeric_model,
    mse,
    train_schedule,
)
from kansym.stats import hash_seed
from kansym.sweep.ledger import ResultLedger
from kansym.sweep.models import (
    Factor,
    OfatDistribution,
    Pipeline,
    PlannedRun,
    RunConfig,
    RunResult,
    SeedSpread,
    SweepPlan,
    enumerate_ofat,
)

logger = logging.getLogger(__name__)

AUTOSYM_PIPELINES = {Pipeline.AUTOSYM, Pipeline.FASTKAN_AUTOSYM}


@runtime_checkable
class SweepProgressCallback(Protocol):
    """Callback protocol for observing sweep progress."""

    def unit_started(self, index: int, unit: WorkUnit) -> None: ...
    def unit_done(self, index: int, results: list[RunResult]) -> None: ...


@dataclass(frozen=True)
class WorkUnit:
    """All pending pipelines of one dataset at one configuration."""

    task: TaskSpec
    config: RunConfig
    factor: Factor
    pipelines: tuple[Pipeline, ...]

    @property
    def label(self) -> str:
        c = self.config
        return (f"{self.task.name} m={c.width} lambda={c.lam:g} "
                f"cycles={c.cycles} seed={c.seed}")


def run_seed(plan: SweepPlan, seed: int) -> int:
    """Seed driving data, initialisation and trials for one OFAT seed level."""
    return hash_seed(plan.master_seed, seed)


def train_config(plan: SweepPlan, config: RunConfig, basis: BasisKind) -> TrainConfig:
    return TrainConfig(
        width=config.width,
        n_mult=plan.n_mult,
        lam=config.lam,
        cycles=config.cycles,
        seed=run_seed(plan, config.seed),
        steps=plan.steps,
        grid=plan.grid,
        basis=basis,
    )


def select_tasks(plan: SweepPlan, tasks: Sequence[TaskSpec]) -> list[TaskSpec]:
    if plan.datasets is None:
        return list(tasks)
    return [find_task(list(tasks), name) for name in plan.datasets]


# ---------------------------------------------------------------------------
# Executing one configuration
# ---------------------------------------------------------------------------


class _RunContext:
    """Builds the result rows of one work unit."""

    def __init__(self, unit: WorkUnit, plan: SweepPlan,
                 dataset: Dataset | None) -> None:
        self.unit = unit
        self.plan = plan
        self.dataset = dataset

    def result(self, pipeline: Pipeline, elapsed: float, **values: object) -> RunResult:
        c = self.unit.config
        return RunResult(
            dataset=self.unit.task.name,
            pipeline=pipeline,
            factor=self.unit.factor,
            width=c.width,
            lam=c.lam,
            cycles=c.cycles,
            seed=c.seed,
            wall_ms=round(elapsed * 1000.0, 3) if self.plan.record_timing else 0.0,
            **values,  # type: ignore[arg-type]
        )

    def invalid(self, pipeline: Pipeline, reason: RunFailure, elapsed: float = 0.0,
                detail: str = "") -> RunResult:
        logger.warning("%s [%s]: invalid run (%s) %s", self.unit.label,
                       pipeline.value, reason.value, detail)
        return self.result(pipeline, elapsed, valid=False, reason=reason)

    def finish(self, pipeline: Pipeline, outcome: ExtractResult,
               elapsed: float) -> RunResult:
        assert self.dataset is not None
        test_mse = mse(outcome.model, self.dataset.x_test, self.dataset.y_test)
        if not np.isfinite(test_mse):
            return self.invalid(pipeline, RunFailure.NON_FINITE_LOSS, elapsed,
                                "non-finite test error")
        logger.info("%s [%s]: test mse %.3e  %s", self.unit.label, pipeline.value,
                    test_mse, outcome.text)
        return self.result(pipeline, elapsed, valid=True, test_mse=test_mse,
                           expression=outcome.text)

    def attempt(self, pipeline: Pipeline, work: Callable[[], ExtractResult],
                started: float) -> RunResult:
        """Run one pipeline; failures become invalid rows instead of raising."""
        try:
            outcome = work()
            return self.finish(pipeline, outcome, time.monotonic() - started)
        except InvalidRunError as e:
            return self.invalid(pipeline, e.reason, time.monotonic() - started,
                                e.detail)
        except Exception:
            logger.exception("%s [%s]: unexpected failure", self.unit.label,
                             pipeline.value)
            return self.result(pipeline, time.monotonic() - started, valid=False,
                               reason=RunFailure.ERROR)


def _numeric_group(ctx: _RunContext, basis: BasisKind,
                   members: list[Pipeline]) -> list[RunResult]:
    """Train one numeric model and hand it to every extractor that shares it."""
    assert ctx.dataset is not None
    dataset, plan = ctx.dataset, ctx.plan
    config = train_config(plan, ctx.unit.config, basis)
    started = time.monotonic()
    model: KanModel | None = None
    failure: tuple[RunFailure, str] | None = None
    try:
        model = create_numeric_model(dataset, config)
        train_schedule(model, dataset, config,
                       deadline=Deadline(plan.time_limit, started))
    except InvalidRunError as e:
        failure = (e.reason, e.detail)
    except Exception:
        logger.exception("%s: %s training failed", ctx.unit.label, basis.value)
        failure = (RunFailure.ERROR, "training raised")
    trained = time.monotonic() - started
    if failure is not None or model is None:
        reason, detail = failure or (RunFailure.ERROR, "")
        return [ctx.invalid(p, reason, trained, detail) for p in members]

    gsr_cfg = GsrConfig(tau=plan.tau)
    results = []
    for pipeline in members:
        begin = time.monotonic()
        # Each extractor gets the full budget minus the shared training time.
        deadline = Deadline(plan.time_limit, begin - trained)
        work: Callable[[], ExtractResult]
        if pipeline in AUTOSYM_PIPELINES:
            work = partial(autosym, model, dataset, config, deadline=deadline)
        else:
            work = partial(gsr, model, dataset, gsr_cfg, config, deadline=deadline)
        results.append(ctx.attempt(pipeline, work, begin - trained))
    return results


def _gmp_run(ctx: _RunContext) -> RunResult:
    assert ctx.dataset is not None
    dataset, plan = ctx.dataset, ctx.plan
    config = train_config(plan, ctx.unit.config, BasisKind.SPLINE)
    started = time.monotonic()

    def work() -> ExtractResult:
        deadline = Deadline(plan.time_limit, started)
        trained = train_gmp(dataset, plan.gmp, config, deadline=deadline)
        chosen = discretize(trained.model, plan.gmp.final_k)
        if not plan.gmp.refine:
            return ExtractResult(chosen.model, compose_expression(chosen.model))
        return refine_restricted(chosen.model, dataset, chosen.retained,
                                 GsrConfig(tau=plan.tau), config, deadline=deadline)

    return ctx.attempt(Pipeline.GMP, work, started)


def execute_unit(unit: WorkUnit, plan: SweepPlan) -> list[RunResult]:
    """Every pending pipeline of one (dataset, configuration); never raises."""
    try:
        dataset = sample_dataset(unit.task, run_seed(plan, unit.config.seed),
                                 plan.n_train, plan.n_test)
    except Exception as e:
        ctx = _RunContext(unit, plan, None)
        return [ctx.invalid(p, RunFailure.ERROR, detail=str(e)) for p in unit.pipelines]
    ctx = _RunContext(unit, plan, dataset)
    by_pipeline: dict[Pipeline, RunResult] = {}
    for basis in (BasisKind.SPLINE, BasisKind.RBF):
        members = [p for p in unit.pipelines
                   if p is not Pipeline.GMP and p.basis is basis]
        if members:
            for result in _numeric_group(ctx, basis, members):
                by_pipeline[result.pipeline] = result
    if Pipeline.GMP in unit.pipelines:
        by_pipeline[Pipeline.GMP] = _gmp_run(ctx)
    return [by_pipeline[p] for p in unit.pipelines]


# ---------------------------------------------------------------------------
# Sweep orchestration
# ---------------------------------------------------------------------------


def _key(dataset: str, pipeline: Pipeline, config: RunConfig) -> tuple:
    return (dataset, pipeline.value, *config.key)


def plan_units(plan: SweepPlan, tasks: Sequence[TaskSpec], runs: list[PlannedRun],
               ledger: ResultLedger) -> list[WorkUnit]:
    units = []
    for task in tasks:
        seen: set[tuple] = set()
        for run in runs:
            if run.config.key in seen:
                continue
            seen.add(run.config.key)
            pending = tuple(p for p in plan.pipelines
                            if not ledger.done(_key(task.name, p, run.config)))
            if pending:
                units.append(WorkUnit(task, run.config, run.factor, pending))
    return units


def run_sweep(
    plan: SweepPlan,
    tasks: Sequence[TaskSpec],
    workers: int = 1,
    ledger: ResultLedger | None = None,
    progress: SweepProgressCallback | None = None,
) -> list[RunResult]:
    """Run every pending (dataset, configuration, pipeline) and return all rows.

    Rows come back in plan order (dataset, OFAT run, pipeline) whatever the
    completion order; a configuration shared by several factor sweeps is run
    once and repeated under each factor.
    """
    runs = enumerate_ofat(plan)
    tasks = select_tasks(plan, tasks)
    ledger = ledger if ledger is not None else ResultLedger()
    units = plan_units(plan, tasks, runs, ledger)
    logger.info("sweep: %d datasets, %d runs each, %d pending units",
                len(tasks), len(runs), len(units))

    def job(index: int, unit: WorkUnit) -> list[RunResult]:
        if progress is not None:
            progress.unit_started(index, unit)
        return execute_unit(unit, plan)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {pool.submit(job, i, unit): i for i, unit in enumerate(units)}
        for future in as_completed(futures):
            index = futures[future]
            results = [ledger.record(r) for r in future.result()]
            if progress is not None:
                progress.unit_done(index, results)

    rows = []
    for task, run, pipeline in itertools.product(tasks, runs, plan.pipelines):
        stored = ledger.get(_key(task.name, pipeline, run.config))
        assert stored is not None
        rows.append(stored.model_copy(update={"factor": run.factor}))
    return rows


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def _unique(results: Iterable[RunResult]) -> list[RunResult]:
    seen: dict[tuple, RunResult] = {}
    for r in results:
        seen.setdefault(r.key, r)
    return list(seen.values())


def build_distributions(
    results: Iterable[RunResult], exclude_seed: bool = True,
) -> dict[tuple[str, Pipeline], OfatDistribution]:
    """Valid test errors per (dataset, pipeline) over unique OFAT configurations.

    With ``exclude_seed`` the seed-factor rows are left out, so each
    distribution spans the hyper-parameter sweeps only.
    """
    rows = [r for r in results if not (exclude_seed and r.factor is Factor.SEED)]
    out: dict[tuple[str, Pipeline], OfatDistribution] = {}
    for r in _unique(rows):
        dist = out.setdefault((r.dataset, r.pipeline),
                              OfatDistribution(r.dataset, r.pipeline))
        if r.valid and r.test_mse is not None:
            dist.samples.append(r.test_mse)
        else:
            dist.n_invalid += 1
    return out


def _seed_rows(results: Iterable[RunResult],
               reference: RunConfig) -> dict[tuple[str, Pipeline], list[RunResult]]:
    groups: dict[tuple[str, Pipeline], list[RunResult]] = {}
    for r in _unique(results):
        c = r.config
        if (c.width, c.lam, c.cycles) != (reference.width, reference.lam,
                                          reference.cycles):
            continue
        groups.setdefault((r.dataset, r.pipeline), []).append(r)
    return groups


def seed_sensitivity(results: Iterable[RunResult],
                     reference: RunConfig) -> dict[tuple[str, Pipeline], SeedSpread]:
    """Mean and sample std of test error over seeds at the reference configuration."""
    out = {}
    for key, rows in _seed_rows(results, reference).items():
        values = np.array([r.test_mse for r in rows
                           if r.valid and r.test_mse is not None], dtype=float)
        mean = float(values.mean()) if values.size else None
        std = float(values.std(ddof=1)) if values.size > 1 else None
        out[key] = SeedSpread(mean, std, int(values.size), len(rows))
    return out


def structural_consistency(
    results: Iterable[RunResult], reference: RunConfig,
) -> dict[tuple[str, Pipeline], float | None]:
    """Share of seed pairs at the reference whose recovered expressions coincide."""
    out: dict[tuple[str, Pipeline], float | None] = {}
    for key, rows in _seed_rows(results, reference).items():
        texts = [r.expression for r in rows if r.valid and r.expression]
        pairs = list(itertools.combinations(texts, 2))
        out[key] = (sum(a == b for a, b in pairs) / len(pairs)) if pairs else None
    return out
