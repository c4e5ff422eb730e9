"""Tests for OFAT planning, sweep execution, the result ledger and aggregation."""

from __future__ import annotations

import csv
from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from kansym import expr
from kansym.errors import ConfigError, InvalidRunError, RunFailure
from kansym.extract import ExtractResult
from kansym.report import write_report
from kansym.sweep import (
    Factor,
    Pipeline,
    ResultLedger,
    RunConfig,
    RunResult,
    SweepPlan,
    build_distributions,
    enumerate_ofat,
    load_plan,
    read_results,
    run_sweep,
    seed_sensitivity,
    structural_consistency,
    write_results,
)
from kansym.sweep.ledger import RESULT_COLUMNS, format_results
from kansym.sweep.models import parse_plan, unique_configs
from kansym.sweep.runner import WorkUnit, execute_unit, plan_units, run_seed


@pytest.fixture()
def small_plan() -> SweepPlan:
    """Seven OFAT runs over four unique configurations."""
    return SweepPlan(
        manifest="desk",
        datasets=["product"],
        pipelines=[Pipeline.AUTOSYM, Pipeline.GSR],
        widths=[1, 2],
        lambdas=[0.01],
        cycles=[0, 1],
        seeds=[1, 2],
        reference=RunConfig(width=1, lam=0.01, cycles=0, seed=1),
        n_mult=0,
        n_train=40,
        n_test=20,
        steps=2,
        grid=3,
        tau=1,
        time_limit=None,
    )


def make_result(dataset="d", pipeline=Pipeline.GSR, factor=Factor.WIDTH, width=5,
                lam=0.01, cycles=3, seed=1, test_mse=0.5, valid=True,
                expression="x1") -> RunResult:
    return RunResult(dataset=dataset, pipeline=pipeline, factor=factor,
                     width=width, lam=lam, cycles=cycles, seed=seed,
                     test_mse=test_mse if valid else None, valid=valid,
                     reason=None if valid else RunFailure.TIMEOUT,
                     expression=expression if valid else "")


def fake_execute(unit: WorkUnit, plan: SweepPlan) -> list[RunResult]:
    c = unit.config
    return [RunResult(dataset=unit.task.name, pipeline=p, factor=unit.factor,
                      width=c.width, lam=c.lam, cycles=c.cycles, seed=c.seed,
                      test_mse=float(c.width), valid=True, expression="x1*x2")
            for p in unit.pipelines]


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------


class TestPlan:
    def test_default_ofat_design(self):
        runs = enumerate_ofat(SweepPlan())
        assert len(runs) == 15
        assert len(unique_configs(runs)) == 12
        assert [r.factor for r in runs[:5]] == [Factor.WIDTH] * 5
        assert {r.config.width for r in runs if r.factor is Factor.LAMBDA} == {5}

    def test_replace_one_factor(self):
        ref = RunConfig(width=5, lam=0.01, cycles=3, seed=1)
        assert ref.replace(Factor.LAMBDA, 0.1).key == (5, 0.1, 3, 1)
        assert ref.replace(Factor.SEED, 7).seed == 7

    def test_reference_must_be_a_level(self):
        plan = SweepPlan(widths=[10, 20])
        with pytest.raises(ConfigError, match="reference width"):
            enumerate_ofat(plan)

    def test_parse_rejects_bad_json(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_plan("{")

    def test_parse_rejects_unknown_pipeline(self):
        with pytest.raises(ConfigError):
            parse_plan('{"pipelines": ["nope"]}')

    def test_bundled_desk_plan(self):
        plan = load_plan("plan_desk")
        assert plan.manifest == "desk"
        assert plan.reference.width == 3
        assert len(enumerate_ofat(plan)) == 3 + 2 + 2 + 3

    def test_missing_plan(self, tmp_path):
        with pytest.raises(ConfigError):
            load_plan(tmp_path / "absent.json")

    def test_run_seed_depends_on_master(self, small_plan):
        other = small_plan.model_copy(update={"master_seed": 9})
        assert run_seed(small_plan, 1) == run_seed(small_plan, 1)
        assert run_seed(small_plan, 1) != run_seed(other, 1)


# ---------------------------------------------------------------------------
# Ledger
# ---------------------------------------------------------------------------


class TestLedger:
    def test_results_file_round_trip(self, tmp_path):
        rows = [make_result(lam=1e-3, test_mse=2.12e-2),
                make_result(pipeline=Pipeline.GMP, valid=False)]
        path = write_results(rows, tmp_path / "out" / "results.csv")
        assert read_results(path) == rows

    def test_format(self):
        text = format_results([make_result(valid=False)])
        header, row = text.splitlines()
        assert header.split(",") == RESULT_COLUMNS
        assert row == "d,gsr,5,0.01,3,1,width,,false,timeout,,0.0"

    def test_header_checked(self, tmp_path):
        path = tmp_path / "results.csv"
        path.write_text("dataset,pipeline\n")
        with pytest.raises(ConfigError, match="expected columns"):
            read_results(path)

    def test_bad_row_names_line(self, tmp_path):
        path = tmp_path / "results.csv"
        text = format_results([make_result()]).replace(",5,", ",five,")
        path.write_text(text)
        with pytest.raises(ConfigError, match="line 2"):
            read_results(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            read_results(tmp_path / "absent.csv")

    def test_first_result_wins(self):
        ledger = ResultLedger()
        first = ledger.record(make_result(test_mse=1.0))
        second = ledger.record(make_result(test_mse=2.0))
        assert second is first
        assert len(ledger) == 1

    def test_journal_and_resume(self, tmp_path):
        journal = tmp_path / "results.csv.partial"
        ledger = ResultLedger(journal)
        ledger.record(make_result(seed=1))
        ledger.record(make_result(seed=2))
        with journal.open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == RESULT_COLUMNS
        assert len(rows) == 3
        resumed = ResultLedger.resume(tmp_path / "results.csv", journal)
        assert len(resumed) == 2
        assert resumed.done(make_result(seed=2).key)
        resumed.discard_journal()
        assert not journal.exists()


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


class TestRunSweep:
    @patch("kansym.sweep.runner.execute_unit", side_effect=fake_execute)
    def test_rows_in_plan_order(self, mock_execute, small_plan, desk_tasks):
        rows = run_sweep(small_plan, desk_tasks)
        assert mock_execute.call_count == 4
        assert len(rows) == 7 * 2
        assert [r.pipeline for r in rows[:2]] == [Pipeline.AUTOSYM, Pipeline.GSR]
        assert [r.factor for r in rows[::2]] == [
            Factor.WIDTH, Factor.WIDTH, Factor.LAMBDA, Factor.CYCLES,
            Factor.CYCLES, Factor.SEED, Factor.SEED]
        assert {r.dataset for r in rows} == {"product"}

    @patch("kansym.sweep.runner.execute_unit", side_effect=fake_execute)
    def test_parallel_matches_serial(self, mock_execute, small_plan, desk_tasks):
        serial = run_sweep(small_plan, desk_tasks, workers=1)
        parallel = run_sweep(small_plan, desk_tasks, workers=3)
        assert serial == parallel

    @patch("kansym.sweep.runner.execute_unit", side_effect=fake_execute)
    def test_resume_skips_finished_work(self, mock_execute, small_plan, desk_tasks,
                                        tmp_path):
        journal = tmp_path / "results.csv.partial"
        first = run_sweep(small_plan, desk_tasks, ledger=ResultLedger(journal))
        mock_execute.reset_mock()
        resumed = ResultLedger.resume(tmp_path / "results.csv", journal)
        second = run_sweep(small_plan, desk_tasks, ledger=resumed)
        mock_execute.assert_not_called()
        assert second == first
        assert len({r.key for r in second}) == 4 * 2

    def test_partial_ledger_only_runs_missing_pipelines(self, small_plan,
                                                        desk_tasks):
        ledger = ResultLedger()
        ref = small_plan.reference
        ledger.record(make_result(dataset="product", pipeline=Pipeline.AUTOSYM,
                                  width=ref.width, lam=ref.lam, cycles=ref.cycles,
                                  seed=ref.seed))
        units = plan_units(small_plan, desk_tasks[1:], enumerate_ofat(small_plan),
                           ledger)
        assert len(units) == 4
        assert units[0].pipelines == (Pipeline.GSR,)
        assert all(u.pipelines == (Pipeline.AUTOSYM, Pipeline.GSR)
                   for u in units[1:])

    @patch("kansym.sweep.runner.execute_unit", side_effect=fake_execute)
    def test_progress_callbacks(self, mock_execute, small_plan, desk_tasks):
        progress = MagicMock()
        run_sweep(small_plan, desk_tasks, progress=progress)
        assert progress.unit_started.call_count == 4
        assert progress.unit_done.call_count == 4

    def test_unknown_dataset(self, small_plan, desk_tasks):
        plan = small_plan.model_copy(update={"datasets": ["nope"]})
        with pytest.raises(ConfigError):
            run_sweep(plan, desk_tasks)


class TestExecuteUnit:
    @pytest.fixture()
    def unit(self, small_plan, desk_tasks) -> WorkUnit:
        return WorkUnit(desk_tasks[1], small_plan.reference, Factor.WIDTH,
                        (Pipeline.AUTOSYM, Pipeline.GSR))

    @patch("kansym.sweep.runner.train_schedule",
           side_effect=InvalidRunError(RunFailure.NON_FINITE_LOSS, "injected"))
    def test_training_failure_marks_every_member(self, mock_train, unit,
                                                 small_plan):
        results = execute_unit(unit, small_plan)
        assert mock_train.call_count == 1
        assert [r.reason for r in results] == [RunFailure.NON_FINITE_LOSS] * 2
        assert not any(r.valid for r in results)
        assert all(r.test_mse is None for r in results)

    @patch("kansym.sweep.runner.gsr")
    @patch("kansym.sweep.runner.autosym")
    @patch("kansym.sweep.runner.train_schedule")
    def test_extractors_share_one_model(self, mock_train, mock_autosym, mock_gsr,
                                        unit, small_plan):
        def extracted(model, *args, **kwargs):
            return ExtractResult(model, expr.var(1))

        mock_autosym.side_effect = extracted
        mock_gsr.side_effect = extracted
        results = execute_unit(unit, small_plan)
        assert mock_train.call_count == 1
        assert mock_autosym.call_args.args[0] is mock_gsr.call_args.args[0]
        assert all(r.valid and r.expression == "x1" for r in results)
        assert all(r.wall_ms == 0.0 for r in results)
        assert all(np.isfinite(r.test_mse) for r in results)

    @patch("kansym.sweep.runner.gsr", side_effect=RuntimeError("boom"))
    @patch("kansym.sweep.runner.autosym",
           side_effect=InvalidRunError(RunFailure.TIMEOUT))
    @patch("kansym.sweep.runner.train_schedule")
    def test_extractor_failures_are_isolated(self, mock_train, mock_autosym,
                                             mock_gsr, unit, small_plan):
        results = execute_unit(unit, small_plan)
        assert [r.reason for r in results] == [RunFailure.TIMEOUT, RunFailure.ERROR]

    @patch("kansym.sweep.runner.mse", return_value=float("nan"))
    @patch("kansym.sweep.runner.autosym")
    @patch("kansym.sweep.runner.train_schedule")
    def test_non_finite_test_error(self, mock_train, mock_autosym, mock_mse,
                                   small_plan, desk_tasks):
        mock_autosym.side_effect = lambda model, *a, **k: ExtractResult(
            model, expr.var(1))
        unit = WorkUnit(desk_tasks[1], small_plan.reference, Factor.WIDTH,
                        (Pipeline.AUTOSYM,))
        [result] = execute_unit(unit, small_plan)
        assert result.reason is RunFailure.NON_FINITE_LOSS

    @patch("kansym.sweep.runner.train_gmp",
           side_effect=InvalidRunError(RunFailure.PRUNED_ALL))
    def test_gmp_failure(self, mock_gmp, small_plan, desk_tasks):
        unit = WorkUnit(desk_tasks[1], small_plan.reference, Factor.SEED,
                        (Pipeline.GMP,))
        [result] = execute_unit(unit, small_plan)
        assert result.pipeline is Pipeline.GMP
        assert result.reason is RunFailure.PRUNED_ALL

    def test_timing_recorded_on_request(self, small_plan, desk_tasks):
        plan = small_plan.model_copy(update={"record_timing": True})
        unit = WorkUnit(desk_tasks[1], plan.reference, Factor.WIDTH,
                        (Pipeline.AUTOSYM,))
        with patch("kansym.sweep.runner.train_schedule"), \
                patch("kansym.sweep.runner.autosym",
                      side_effect=lambda m, *a, **k: ExtractResult(m, expr.var(1))):
            [result] = execute_unit(unit, plan)
        assert result.wall_ms >= 0.0
        assert result.valid


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


class TestAggregation:
    def test_distributions_skip_seed_rows_and_duplicates(self):
        rows = [
            make_result(factor=Factor.WIDTH, width=5, test_mse=0.1),
            make_result(factor=Factor.LAMBDA, width=5, test_mse=0.1),
            make_result(factor=Factor.WIDTH, width=10, test_mse=0.3),
            make_result(factor=Factor.CYCLES, cycles=1, valid=False),
            make_result(factor=Factor.SEED, seed=2, test_mse=9.0),
        ]
        dist = build_distributions(rows)[("d", Pipeline.GSR)]
        assert sorted(dist.samples) == [0.1, 0.3]
        assert dist.n_invalid == 1
        with_seeds = build_distributions(rows, exclude_seed=False)
        assert 9.0 in with_seeds[("d", Pipeline.GSR)].samples

    def test_seed_spread(self):
        ref = RunConfig(width=5, lam=0.01, cycles=3, seed=1)
        rows = [make_result(factor=Factor.SEED, seed=s, test_mse=v)
                for s, v in ((1, 1.0), (2, 2.0), (3, 3.0))]
        rows.append(make_result(factor=Factor.WIDTH, width=10, test_mse=50.0))
        spread = seed_sensitivity(rows, ref)[("d", Pipeline.GSR)]
        assert (spread.mean, spread.std) == (2.0, 1.0)
        assert (spread.n_valid, spread.n_runs) == (3, 3)
        assert not spread.dagger

    def test_seed_spread_with_invalid_runs(self):
        ref = RunConfig(width=5, lam=0.01, cycles=3, seed=1)
        rows = [make_result(factor=Factor.SEED, seed=1, test_mse=1.0),
                make_result(factor=Factor.SEED, seed=2, valid=False)]
        spread = seed_sensitivity(rows, ref)[("d", Pipeline.GSR)]
        assert spread.std is None
        assert spread.dagger

    def test_structural_consistency(self):
        ref = RunConfig(width=5, lam=0.01, cycles=3, seed=1)
        rows = [make_result(factor=Factor.SEED, seed=s, expression=e)
                for s, e in ((1, "x1"), (2, "x1"), (3, "x2"))]
        share = structural_consistency(rows, ref)[("d", Pipeline.GSR)]
        assert share == pytest.approx(1 / 3)
        assert structural_consistency(rows[:1], ref)[("d", Pipeline.GSR)] is None


# ---------------------------------------------------------------------------
# End to end
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_small_sweep_end_to_end(small_plan, desk_tasks, tmp_path):
    plan = small_plan.model_copy(update={
        "pipelines": list(Pipeline),
        "widths": [1], "cycles": [0], "seeds": [1],
    })
    rows = run_sweep(plan, desk_tasks, workers=2)
    assert len(rows) == 4 * 5
    assert {r.pipeline for r in rows} == set(Pipeline)
    for r in rows:
        assert r.valid == (r.reason is None)
        if r.valid:
            assert np.isfinite(r.test_mse)
    path = write_results(rows, tmp_path / "results.csv")
    assert read_results(path) == rows


@pytest.mark.slow
def test_repeated_sweep_is_byte_identical(small_plan, desk_tasks, tmp_path):
    plan = small_plan.model_copy(update={"datasets": None})
    outputs = []
    for name in ("first", "second"):
        rows = run_sweep(plan, desk_tasks, workers=2)
        out = tmp_path / name
        files = write_report(rows, out / "report", resamples=200)
        written = [write_results(rows, out / "results.csv"), files.stats_csv,
                   files.markdown, *files.figures]
        outputs.append([(p.name, p.read_bytes()) for p in written])
    assert outputs[0] == outputs[1]


@pytest.mark.slow
def test_gsr_beats_autosym_on_sin_square(desk_tasks):
    plan = load_plan("plan_desk").model_copy(update={
        "datasets": ["sin-square"],
        "pipelines": [Pipeline.AUTOSYM, Pipeline.GSR],
    })
    rows = run_sweep(plan, desk_tasks, workers=4)
    medians = {}
    for pipeline in (Pipeline.AUTOSYM, Pipeline.GSR):
        errors = [r.test_mse for r in rows if r.pipeline is pipeline and r.valid]
        assert errors
        medians[pipeline] = float(np.median(errors))
    assert medians[Pipeline.GSR] <= medians[Pipeline.AUTOSYM]
