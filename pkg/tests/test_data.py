"""Tests for task manifests and dataset sampling."""

from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from kansym.data import (
    TaskSpec,
    find_task,
    load_manifest,
    parse_manifest,
    sample_dataset,
)
from kansym.errors import ConfigError, ManifestError


def manifest_text(*tasks: dict) -> str:
    return "[\n" + ",\n".join("  " + json.dumps(t) for t in tasks) + "\n]"


GOOD = {"name": "a", "formula": "x1", "vars": [{"name": "x1", "lo": 0, "hi": 1}]}

# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


class TestManifest:
    def test_bundled_feynman(self):
        tasks = load_manifest("feynman")
        assert len(tasks) == 10
        assert tasks[0].name == "I.10.7"
        assert all(t.n_inputs >= 1 for t in tasks)

    def test_bundled_desk(self, desk_tasks):
        assert [t.name for t in desk_tasks] == ["sin-square", "product"]

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "tasks.json"
        path.write_text(manifest_text(GOOD))
        assert [t.name for t in load_manifest(path)] == ["a"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "absent.json")

    def test_invalid_json_position(self):
        with pytest.raises(ManifestError) as info:
            parse_manifest('[\n  {"name": }\n]')
        assert info.value.line == 2

    def test_bad_entry_position(self):
        text = manifest_text(GOOD, {"name": "b", "vars": []})
        with pytest.raises(ManifestError) as info:
            parse_manifest(text)
        assert (info.value.line, info.value.column) == (3, 3)

    @pytest.mark.parametrize("entry", [
        {**GOOD, "formula": "x1 +"},
        {**GOOD, "formula": "x2"},
        {**GOOD, "vars": [{"name": "x1", "lo": 2, "hi": 1}]},
    ])
    def test_invalid_task(self, entry):
        with pytest.raises(ManifestError):
            parse_manifest(manifest_text(entry))

    def test_duplicate_names(self):
        with pytest.raises(ManifestError):
            parse_manifest(manifest_text(GOOD, GOOD))

    def test_must_be_array(self):
        with pytest.raises(ManifestError):
            parse_manifest(json.dumps(GOOD))

    def test_unknown_task(self, desk_tasks):
        with pytest.raises(ConfigError, match="available"):
            find_task(desk_tasks, "nope")


class TestTaskSpec:
    def test_named_variables(self):
        task = TaskSpec(name="ke", formula="m*v^2/2",
                        vars=[{"name": "m", "lo": 1, "hi": 5},
                              {"name": "v", "lo": 1, "hi": 2}])
        assert task.variable_names == ["m", "v"]
        assert task.evaluate(np.array([[2.0, 3.0]]))[0] == pytest.approx(9.0)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


class TestSampleDataset:
    def test_sizes_and_ranges(self, desk_tasks):
        task = find_task(desk_tasks, "sin-square")
        data = sample_dataset(task, seed=1, n_train=30, n_test=10)
        assert data.x_train.shape == (30, 2)
        assert data.x_test.shape == (10, 2)
        assert np.all((data.x_train >= -2.0) & (data.x_train <= 2.0))
        assert np.allclose(data.y_train,
                           np.sin(data.x_train[:, 0]) + data.x_train[:, 1] ** 2)

    def test_seeded(self, desk_tasks):
        task = find_task(desk_tasks, "product")
        a = sample_dataset(task, seed=5, n_train=20, n_test=5)
        b = sample_dataset(task, seed=5, n_train=20, n_test=5)
        c = sample_dataset(task, seed=6, n_train=20, n_test=5)
        assert np.array_equal(a.x_train, b.x_train)
        assert not np.array_equal(a.x_train, c.x_train)

    def test_non_finite_formula(self):
        task = TaskSpec(name="bad", formula="log(x1)",
                        vars=[{"name": "x1", "lo": -2, "hi": -1}])
        with pytest.raises(ConfigError, match="non-finite"):
            sample_dataset(task, seed=0, n_train=10, n_test=0, max_retries=2)

    def test_needs_training_points(self, desk_tasks):
        with pytest.raises(ConfigError):
            sample_dataset(desk_tasks[0], seed=0, n_train=0)


class TestValidationSplit:
    def test_disjoint_rows(self, product_data):
        split = product_data.split_validation(0.25, seed=1)
        assert len(split.y_val) == 12
        assert len(split.y_fit) == 36
        rows = {tuple(r) for r in split.x_fit} | {tuple(r) for r in split.x_val}
        assert len(rows) == 48

    def test_zero_fraction_aliases_training(self, product_data):
        split = product_data.split_validation(0.0, seed=1)
        assert split.x_val is product_data.x_train

    def test_fraction_range(self, product_data):
        with pytest.raises(ConfigError):
            product_data.split_validation(1.0, seed=1)

    def test_to_csv(self, tmp_path, product_data):
        path = product_data.to_csv(tmp_path / "train.csv")
        with path.open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["x1", "x2", "y"]
        assert len(rows) == 49
        assert float(rows[1][2]) == product_data.y_train[0]
