from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import TYPE_CHECKING, Any

from rich.live import Live
from rich.table import Table

from kansym.data import Dataset, find_task, load_manifest, sample_dataset
from kansym.errors import ConfigError, InvalidRunError
from kansym.extract import ExtractResult, GsrConfig, autosym, gsr, write_trial_log
from kansym.gates import (
    GateTrajectory,
    GmpConfig,
    discretize,
    refine_restricted,
    train_gmp,
)
from kansym.log import (
    console,
    make_overall_progress,
    make_stage_progress,
    setup_logging,
)
from kansym.network.checkpoint import load_checkpoint, save_checkpoint
from kansym.network.train import (
    Deadline,
    TrainConfig,
    create_numeric_model,
    mse,
    train_schedule,
)
from kansym.report import fmt, write_report
from kansym.selftest import run_selftest
from kansym.sweep.ledger import ResultLedger, read_results, write_results
from kansym.sweep.models import Pipeline, enumerate_ofat, load_plan
from kansym.sweep.runner import WorkUnit, plan_units, run_sweep, select_tasks

if TYPE_CHECKING:
    from rich.progress import TaskID

    from kansym.network.model import KanModel
    from kansym.sweep.models import RunResult

EXIT_CONFIG = 2
EXIT_FAILURES = 3
THREADS_ENV = "KANSYM_THREADS"


def default_workers() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError as e:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from e
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# train / extract
# ---------------------------------------------------------------------------


def _train_config(args: argparse.Namespace, pipeline: Pipeline | None) -> TrainConfig:
    try:
        return TrainConfig(
            width=args.width, n_mult=args.mult, lam=args.lam, cycles=args.cycles,
            seed=args.seed, steps=args.steps, grid=args.grid,
            basis=(pipeline or Pipeline.AUTOSYM).basis, time_limit=args.time_limit,
        )
    except ValueError as e:
        raise ConfigError(f"invalid training options: {e}") from e


def _dataset(manifest: str, task_name: str, seed: int, n_train: int,
             n_test: int) -> Dataset:
    task = find_task(load_manifest(manifest), task_name)
    return sample_dataset(task, seed, n_train, n_test)


def _extract(model: KanModel, dataset: Dataset, method: Pipeline,
             config: TrainConfig, tau: int, deadline: Deadline) -> ExtractResult:
    if method in (Pipeline.AUTOSYM, Pipeline.FASTKAN_AUTOSYM):
        return autosym(model, dataset, config, deadline=deadline)
    return gsr(model, dataset, GsrConfig(tau=tau), config, deadline=deadline)


def _write_outcome(out: Path, outcome: ExtractResult, dataset: Dataset,
                   metadata: dict[str, Any]) -> float:
    test_mse = mse(outcome.model, dataset.x_test, dataset.y_test)
    (out / "expression.txt").write_text(outcome.text + "\n")
    save_checkpoint(outcome.model, out / "symbolic.json",
                    {**metadata, "test_mse": test_mse, "expression": outcome.text})
    trials = getattr(outcome, "trials", None)
    if trials:
        write_trial_log(trials, out / "trials.csv", run_id=dataset.name, timing=False)
    if outcome.flagged:
        console.print(f"[yellow]{len(outcome.flagged)} edge(s) left numeric")
    console.print(f"[green]test mse {fmt(test_mse)}[/]  y = {outcome.text}")
    return test_mse


def cmd_train(args: argparse.Namespace) -> int:
    pipeline = Pipeline(args.pipeline) if args.pipeline else None
    config = _train_config(args, pipeline)
    dataset = _dataset(args.manifest, args.task, args.seed, args.n_train, args.n_test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metadata: dict[str, Any] = {
        "manifest": args.manifest, "task": args.task, "n_train": args.n_train,
        "n_test": args.n_test, "pipeline": args.pipeline, "tau": args.tau,
        "train": config.model_dump(mode="json"),
    }
    deadline = Deadline(args.time_limit)

    if pipeline is Pipeline.GMP:
        try:
            gmp = GmpConfig(final_k=args.final_k, initial_cap=args.initial_cap)
        except ValueError as e:
            raise ConfigError(f"invalid gate caps: {e}") from e
        trajectory = GateTrajectory(every=args.trajectory_every)
        result = train_gmp(dataset, gmp, config, trajectory=trajectory,
                           deadline=deadline)
        save_checkpoint(result.model, out / "gated.json",
                        {**metadata, "gmp": gmp.model_dump(mode="json")})
        trajectory.to_csv(out / "gates.csv")
        chosen = discretize(result.model, gmp.final_k)
        outcome = refine_restricted(chosen.model, dataset, chosen.retained,
                                    GsrConfig(tau=args.tau), config, deadline=deadline)
        _write_outcome(out, outcome, dataset, metadata)
        return 0

    model = create_numeric_model(dataset, config)
    steps = config.steps * (config.cycles + 2)
    with make_stage_progress() as progress:
        task_id = progress.add_task(f"training {dataset.name}", total=steps)
        train_schedule(model, dataset, config, deadline=deadline,
                       on_step=lambda step, params: progress.advance(task_id))
    save_checkpoint(model, out / "numeric.json", metadata)
    console.print(f"numeric test mse {fmt(mse(model, dataset.x_test, dataset.y_test))}")
    if pipeline is not None:
        outcome = _extract(model, dataset, pipeline, config, args.tau, deadline)
        _write_outcome(out, outcome, dataset, metadata)
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    model, metadata = load_checkpoint(args.checkpoint)
    try:
        config = TrainConfig.model_validate(metadata["train"])
        dataset = _dataset(metadata["manifest"], metadata["task"], config.seed,
                           metadata["n_train"], metadata["n_test"])
    except (KeyError, ValueError) as e:
        raise ConfigError(
            f"checkpoint {args.checkpoint} lacks run metadata: {e}"
        ) from e
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    deadline = Deadline(args.time_limit)
    if "gmp" in metadata:
        gmp = GmpConfig.model_validate(metadata["gmp"])
        chosen = discretize(model, gmp.final_k)
        outcome = refine_restricted(chosen.model, dataset, chosen.retained,
                                    GsrConfig(tau=args.tau), config, deadline=deadline)
    else:
        outcome = _extract(model, dataset, Pipeline(args.method), config, args.tau,
                           deadline)
    _write_outcome(out, outcome, dataset, metadata)
    return 0


# ---------------------------------------------------------------------------
# sweep / report / selftest
# ---------------------------------------------------------------------------


class SweepProgressDisplay:
    """Rich-based implementation of SweepProgressCallback for the CLI."""

    def __init__(self, total_units: int) -> None:
        self.overall = make_overall_progress()
        self.units = make_stage_progress()
        self.overall_task = self.overall.add_task("Sweeping", total=total_units)
        self.table = Table.grid()
        self.table.add_row(self.overall)
        self.table.add_row(self.units)
        self._task_ids: dict[int, TaskID] = {}

    def unit_started(self, index: int, unit: WorkUnit) -> None:
        self._task_ids[index] = self.units.add_task(unit.label, total=None)

    def unit_done(self, index: int, results: list[RunResult]) -> None:
        task_id = self._task_ids.pop(index, None)
        if task_id is not None:
            self.units.remove_task(task_id)
        self.overall.advance(self.overall_task)


def cmd_sweep(args: argparse.Namespace) -> int:
    plan = load_plan(args.plan)
    plan = plan.model_copy(update={"master_seed": args.seed})
    if args.datasets:
        plan = plan.model_copy(update={"datasets": args.datasets})
    tasks = load_manifest(args.manifest or plan.manifest)
    workers = args.workers or default_workers()
    out = Path(args.out)
    journal = out.with_name(out.name + ".partial")
    if args.resume:
        ledger = ResultLedger.resume(out, journal)
    else:
        journal.unlink(missing_ok=True)
        ledger = ResultLedger(journal)
    console.print(
        f"Sweeping [bold]{args.plan}[/] (seed={args.seed}, workers={workers}, "
        f"{len(ledger)} run(s) already recorded)"
    )
    pending = plan_units(plan, select_tasks(plan, tasks), enumerate_ofat(plan), ledger)
    display = SweepProgressDisplay(total_units=len(pending))
    with Live(display.table, console=console, refresh_per_second=4):
        results = run_sweep(plan, tasks, workers=workers, ledger=ledger,
                            progress=display)
    write_results(results, out)
    ledger.discard_journal()
    invalid = [r for r in results if not r.valid]
    if invalid:
        console.print(f"\n[green]{len(results) - len(invalid)} valid[/], "
                      f"[red]{len(invalid)} invalid[/] rows written to {out}")
        return EXIT_FAILURES
    console.print(f"\n[green]All {len(results)} rows valid, written to {out}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    results = read_results(args.results)
    files = write_report(results, args.out, seed=args.seed, resamples=args.resamples)
    table = Table(title="Report")
    table.add_column("file")
    for path in [files.stats_csv, files.markdown, *files.figures]:
        table.add_row(str(path))
    console.print(table)
    return 0


def cmd_selftest(args: argparse.Namespace) -> int:
    checks = run_selftest(seed=args.seed)
    table = Table(title="Self-test")
    table.add_column("check")
    table.add_column("result")
    table.add_column("detail", style="dim")
    for c in checks:
        table.add_row(c.name, "[green]ok" if c.passed else "[red]FAILED", c.detail)
    console.print(table)
    return 0 if all(c.passed for c in checks) else EXIT_FAILURES


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", default="feynman",
                   help="Task manifest file or bundled name (default: feynman)")
    p.add_argument("--task", required=True, help="Task name in the manifest")
    p.add_argument("--seed", type=int, required=True, help="Run seed")
    p.add_argument("--width", type=int, default=5, help="Additive hidden units")
    p.add_argument("--mult", type=int, default=2, help="Multiplication units")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-2,
                   help="Sparsity strength during pruning cycles")
    p.add_argument("--cycles", type=int, default=3, help="Prune-and-refit cycles")
    p.add_argument("--steps", type=int, default=200, help="Adam steps per stage")
    p.add_argument("--grid", type=int, default=20,
                   help="Spline intervals or RBF centres")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=1000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kansym",
        description="Symbolic regression with Kolmogorov-Arnold networks",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    pipelines = [p.value for p in Pipeline]

    # --- train ---
    tp = sub.add_parser("train", help="Train a model and optionally extract a formula")
    _add_run_options(tp)
    tp.add_argument("--pipeline", choices=pipelines, default=None,
                    help="Extraction pipeline to run after training")
    tp.add_argument("--tau", type=int, default=100, help="Fine-tune steps per trial")
    tp.add_argument("--final-k", type=int, default=5, help="GMP final gate cap")
    tp.add_argument("--initial-cap", type=int, default=10, help="GMP first gate cap")
    tp.add_argument("--trajectory-every", type=int, default=10,
                    help="GMP gate trajectory sampling interval in steps")
    tp.add_argument("--time-limit", type=float, default=None, help="Seconds")
    tp.add_argument("--out", default="./run", help="Output directory")
    tp.set_defaults(func=cmd_train)

    # --- extract ---
    ep = sub.add_parser("extract", help="Extract a formula from a saved checkpoint")
    ep.add_argument("checkpoint", help="numeric.json or gated.json from train")
    ep.add_argument("--method", choices=["autosym", "gsr"], default="gsr")
    ep.add_argument("--tau", type=int, default=100, help="Fine-tune steps per trial")
    ep.add_argument("--time-limit", type=float, default=None, help="Seconds")
    ep.add_argument("--out", default="./extract", help="Output directory")
    ep.set_defaults(func=cmd_extract)

    # --- sweep ---
    sp = sub.add_parser("sweep", help="Run an OFAT sweep")
    sp.add_argument("plan", help="Plan JSON file or bundled plan_feynman / plan_desk")
    sp.add_argument("--seed", type=int, required=True, help="Master seed")
    sp.add_argument("--manifest", default=None, help="Override the plan's manifest")
    sp.add_argument("--datasets", nargs="+", default=None, help="Restrict to tasks")
    sp.add_argument("--workers", "-w", type=int, default=None,
                    help=f"Concurrent runs (default: ${THREADS_ENV} or CPU count)")
    sp.add_argument("--resume", action="store_true",
                    help="Skip runs already recorded in the output or its journal")
    sp.add_argument("--out", default="results.csv", help="Results CSV path")
    sp.set_defaults(func=cmd_sweep)

    # --- report ---
    rp = sub.add_parser("report", help="Statistics, tables and violins from results")
    rp.add_argument("results", help="Results CSV written by sweep")
    rp.add_argument("--out", default="./report", help="Output directory")
    rp.add_argument("--seed", type=int, default=0, help="Bootstrap seed")
    rp.add_argument("--resamples", type=int, default=10_000, help="Bootstrap resamples")
    rp.set_defaults(func=cmd_report)

    # --- selftest ---
    st = sub.add_parser("selftest", help="Run the built-in numerical oracles")
    st.add_argument("--seed", type=int, default=0)
    st.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> None:
    args = build_parser().parse_args(argv)
    setup_logging(logging.DEBUG if args.verbose else logging.INFO)
    try:
        code = args.func(args)
    except ConfigError as exc:
        console.print(f"[red]{exc}")
        sys.exit(EXIT_CONFIG)
    except InvalidRunError as exc:
        console.print(f"[red]Run failed: {exc}")
        sys.exit(EXIT_FAILURES)
    sys.exit(code)

