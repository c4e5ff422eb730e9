"""Tests for report tables, statistics CSV and violin figures."""

from __future__ import annotations

import csv

import pytest

from kansym.errors import RunFailure
from kansym.report import (
    NA,
    STATS_COLUMNS,
    build_reports,
    fmt,
    fmt_p,
    format_markdown,
    format_stats_csv,
    reference_config,
    violin_svg,
    write_report,
)
from kansym.sweep import Factor, Pipeline, RunResult


def row(pipeline: Pipeline, width: int, test_mse: float | None,
        factor: Factor = Factor.WIDTH, seed: int = 1, dataset: str = "I.10.7",
        expression: str = "x1") -> RunResult:
    valid = test_mse is not None
    return RunResult(dataset=dataset, pipeline=pipeline, factor=factor, width=width,
                     lam=0.01, cycles=3, seed=seed, test_mse=test_mse, valid=valid,
                     reason=None if valid else RunFailure.PRUNED_ALL,
                     expression=expression if valid else "")


@pytest.fixture()
def results() -> list[RunResult]:
    rows = []
    for width, a, g in ((5, 0.5, 0.01), (10, 0.6, 0.02), (20, 0.7, 0.03)):
        rows.append(row(Pipeline.AUTOSYM, width, a))
        rows.append(row(Pipeline.GSR, width, g))
        rows.append(row(Pipeline.GMP, width, None))
    for seed in (1, 2):
        rows.append(row(Pipeline.AUTOSYM, 5, 0.5, Factor.SEED, seed))
        rows.append(row(Pipeline.GSR, 5, 0.01 * seed, Factor.SEED, seed))
        rows.append(row(Pipeline.GMP, 5, None, Factor.SEED, seed))
    return rows


class TestFormatting:
    @pytest.mark.parametrize(("value", "text"), [
        (2.12e-2, "2.12e-2"), (9.49, "9.49e0"), (123456.0, "1.23e5"),
        (None, NA), (float("nan"), NA), (float("inf"), NA),
    ])
    def test_fmt(self, value, text):
        assert fmt(value) == text

    def test_fmt_p(self):
        assert fmt_p(0.05) == "0.050"
        assert fmt_p(1e-5) == "1.00e-5"


class TestBuildReports:
    def test_best_and_reduction(self, results):
        [report] = build_reports(results, resamples=200)
        assert report.name == "I.10.7"
        assert report.best == "gsr"
        assert report.median(Pipeline.GMP) is None
        assert report.distributions[Pipeline.GMP].n_invalid == 3
        assert report.reduction == pytest.approx(100 * (1 - 0.02 / 0.6))
        assert [c.other for c in report.comparisons] == ["autosym"]

    def test_seeded(self, results):
        a = build_reports(results, seed=4, resamples=200)[0].comparisons
        b = build_reports(results, seed=4, resamples=200)[0].comparisons
        assert a == b

    def test_stats_csv(self, results):
        text = format_stats_csv(build_reports(results, resamples=200))
        rows = list(csv.reader(text.splitlines()))
        assert rows[0] == STATS_COLUMNS
        assert rows[1][:2] == ["I.10.7", "gsr vs autosym"]
        assert float(rows[1][4]) == pytest.approx(0.05)


class TestMarkdown:
    def test_tables(self, results):
        text = format_markdown(build_reports(results, resamples=200), results)
        assert "| I.10.7 | 6.00e-1 | **2.00e-2** | N/A | gsr | 96.7% |" in text
        assert "## Seed sensitivity at the reference configuration" in text
        assert "m=5, lambda=0.01, cycles=3" in text
        assert "Holm" in text
        assert "sampled uniformly and independently" in text

    def test_seed_table_marks_small_samples(self, results):
        text = format_markdown(build_reports(results, resamples=200), results)
        assert "5.00e-1 ± 0.00e0 †" in text
        assert "| I.10.7 | 1.00 | 1.00 | N/A |" in text

    def test_no_seed_rows(self, results):
        rows = [r for r in results if r.factor is not Factor.SEED]
        assert reference_config(rows) is None
        text = format_markdown(build_reports(rows, resamples=200), rows)
        assert "Seed sensitivity" not in text


class TestFigures:
    def test_violin_is_deterministic(self, results):
        [report] = build_reports(results, resamples=200)
        first = violin_svg(report)
        assert first.lstrip().startswith("<?xml")
        assert "<svg" in first
        assert violin_svg(report) == first

    def test_write_report(self, tmp_path, results):
        files = write_report(results, tmp_path / "report", resamples=200)
        assert files.stats_csv.read_text().startswith("dataset,comparison")
        assert files.markdown.read_text().startswith("# OFAT report")
        assert [p.name for p in files.figures] == ["violin_I.10.7.svg"]
