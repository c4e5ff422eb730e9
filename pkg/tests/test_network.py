"""Tests for the MultKAN model and its training schedule."""

from __future__ import annotations

import numpy as np
import pytest

from kansym.diffengine import record_forward
from kansym.errors import InvalidRunError, RunFailure
from kansym.network.edges import EdgeKind, PrunedEdge, SymbolicEdgeFunction
from kansym.network.model import EdgeImportance, KanLayer, KanModel
from kansym.network.train import (
    BasisKind,
    Deadline,
    TrainConfig,
    create_numeric_model,
    fit,
    mse,
    train_schedule,
)
from kansym.oplib import get_form


def identity_edge() -> SymbolicEdgeFunction:
    return SymbolicEdgeFunction(get_form("x"))


def sum_and_product_model() -> KanModel:
    """x1 + x1*x2 with one additive and one multiplication unit."""
    first = KanLayer([
        [identity_edge(), PrunedEdge()],
        [identity_edge(), PrunedEdge()],
        [PrunedEdge(), identity_edge()],
    ])
    second = KanLayer([[identity_edge(), identity_edge()]])
    return KanModel(2, 1, 1, [first, second])


# ---------------------------------------------------------------------------
# Structure and evaluation
# ---------------------------------------------------------------------------


class TestKanModel:
    def test_multiplication_unit(self):
        model = sum_and_product_model()
        x = np.array([[2.0, 3.0], [-1.0, 0.5]])
        assert np.allclose(model.forward(x), x[:, 0] + x[:, 0] * x[:, 1])

    def test_subnode_layout(self):
        model = sum_and_product_model()
        assert model.n_sub == 3
        assert model.n_hidden == 2
        assert model.unit_subnodes(0) == (0,)
        assert model.unit_subnodes(1) == (1, 2)

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            KanModel(2, 2, 1, sum_and_product_model().layers)

    def test_input_columns_checked(self):
        with pytest.raises(ValueError):
            sum_and_product_model().forward(np.zeros((2, 3)))

    def test_tape_matches_numpy(self):
        model = sum_and_product_model()
        x = np.array([[0.2, -0.4], [1.5, 0.7]])

        def graph(tape, xs, ps):
            return model.build(tape, xs, ps).prediction

        value, _ = record_forward(graph, x, model.get_parameters())
        assert np.allclose(value, model.forward(x))

    def test_parameters_round_trip(self):
        model = sum_and_product_model()
        params = model.get_parameters()
        assert params.size == model.n_parameters() == 5 * 4
        model.set_parameters(params * 2.0)
        assert np.allclose(model.get_parameters(), params * 2.0)
        with pytest.raises(ValueError):
            model.set_parameters(params[:-1])

    def test_create_seeded(self, product_data):
        config = TrainConfig(width=2, n_mult=1, grid=4)
        a = create_numeric_model(product_data, config)
        b = create_numeric_model(product_data, config)
        assert np.array_equal(a.get_parameters(), b.get_parameters())
        assert len(a.numeric_edges()) == 4 * 2 + 3

    def test_rbf_edges(self, product_data):
        model = create_numeric_model(
            product_data, TrainConfig(width=2, n_mult=0, grid=4, basis=BasisKind.RBF))
        kinds = {model.edge(e).kind for e in model.active_edges()}
        assert kinds == {EdgeKind.RBF}


class TestImportanceAndPruning:
    def test_importance_normalised_per_layer(self):
        model = sum_and_product_model()
        x = np.array([[2.0, 3.0], [-1.0, 0.5]])
        importance = model.edge_importance(x)
        assert max(importance[e] for e in model.edge_ids() if e[0] == 0) == 1.0
        assert importance[(0, 0, 1)] == 0.0

    def test_prune_masks_weak_unit(self):
        model = sum_and_product_model()
        scores = {eid: 1.0 for eid in model.edge_ids()}
        scores[(0, 0, 0)] = 0.01
        scores[(0, 0, 1)] = 0.0
        scores[(1, 0, 0)] = 0.01
        assert model.prune(EdgeImportance(scores), node_threshold=0.1) == [0]
        assert model.hidden_mask.tolist() == [False, True]
        assert model.edge((1, 0, 0)).kind is EdgeKind.PRUNED

    def test_pruning_everything_is_invalid(self):
        model = sum_and_product_model()
        with pytest.raises(InvalidRunError) as info:
            model.prune(EdgeImportance({}), node_threshold=0.1)
        assert info.value.reason is RunFailure.PRUNED_ALL

    def test_ranked_ties_by_edge_id(self):
        importance = EdgeImportance({(0, 1, 0): 0.5, (0, 0, 0): 0.5, (1, 0, 0): 0.9})
        assert importance.ranked() == [(1, 0, 0), (0, 0, 0), (0, 1, 0)]


class TestSnapshot:
    def test_restore_undoes_changes(self):
        model = sum_and_product_model()
        x = np.array([[0.3, 0.9]])
        before = model.forward(x)
        snap = model.snapshot()
        model.set_parameters(model.get_parameters() + 1.0)
        model.set_edge((0, 0, 0), PrunedEdge())
        model.restore(snap)
        assert np.array_equal(model.forward(x), before)

    def test_randomized_trials_restore_bit_identical(self, product_data, rng):
        model = create_numeric_model(product_data, TrainConfig(width=2, n_mult=1,
                                                               grid=4))
        before = model.get_parameters().copy()
        edges = list(model.edge_ids())
        snap = model.snapshot()
        for _ in range(1000):
            eid = edges[rng.integers(len(edges))]
            if rng.random() < 0.5:
                model.set_edge(eid, SymbolicEdgeFunction(get_form("sin")))
            else:
                n = model.n_parameters()
                model.set_parameters(model.get_parameters()
                                     + rng.standard_normal(n))
            model.forward(product_data.x_test)
            model.restore(snap)
            assert np.array_equal(model.get_parameters(), before)

    def test_nested_snapshots_restore_in_reverse_order(self):
        model = sum_and_product_model()
        original = model.get_parameters().copy()
        outer = model.snapshot()
        model.set_parameters(original + 1.0)
        shifted = model.get_parameters().copy()
        inner = model.snapshot()
        model.set_edge((0, 0, 0), PrunedEdge())
        model.restore(inner)
        assert np.array_equal(model.get_parameters(), shifted)
        assert model.edge((0, 0, 0)).kind is EdgeKind.SYMBOLIC
        model.restore(outer)
        assert np.array_equal(model.get_parameters(), original)

    def test_copy_is_independent(self):
        model = sum_and_product_model()
        twin = model.copy()
        twin.set_parameters(np.zeros(twin.n_parameters()))
        assert model.get_parameters().any()


class TestGridRefresh:
    def test_noop_on_creation_data(self, product_data):
        model = create_numeric_model(product_data, TrainConfig(width=2, n_mult=1,
                                                               grid=4))
        assert model.refresh_hidden_grids(product_data.x_train) == 0

    def test_rescaled_hidden_range(self, product_data):
        model = create_numeric_model(product_data, TrainConfig(width=2, n_mult=0,
                                                               grid=4))
        model.set_parameters(model.get_parameters() * 3.0)
        assert model.refresh_hidden_grids(product_data.x_train) > 0
        hidden = model.trace(product_data.x_train).hidden
        lo, hi = model.edge((1, 0, 0)).input_range
        assert lo == pytest.approx(hidden[:, 0].min())
        assert hi == pytest.approx(hidden[:, 0].max())


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class TestFit:
    def test_loss_decreases(self, line_data, tiny_config):
        model = create_numeric_model(line_data, tiny_config)
        report = fit(model, line_data.x_train, line_data.y_train, steps=50,
                     lr=1e-2)
        assert report.final_loss < report.initial_loss
        assert mse(model, line_data.x_train, line_data.y_train) == pytest.approx(
            report.final_loss)

    def test_non_finite_target(self, line_data, tiny_config):
        model = create_numeric_model(line_data, tiny_config)
        y = line_data.y_train.copy()
        y[0] = np.nan
        with pytest.raises(InvalidRunError) as info:
            fit(model, line_data.x_train, y, steps=3)
        assert info.value.reason is RunFailure.NON_FINITE_LOSS

    def test_step_hook_called(self, line_data, tiny_config):
        model = create_numeric_model(line_data, tiny_config)
        seen = []
        fit(model, line_data.x_train, line_data.y_train, steps=4,
            on_step=lambda step, params: seen.append(step))
        assert seen == [0, 1, 2, 3]


class TestTrainSchedule:
    def test_stage_order(self, line_data, tiny_config):
        model = create_numeric_model(line_data, tiny_config)
        cycles = []
        report = train_schedule(model, line_data, tiny_config,
                                on_cycle=lambda m, c, imp: cycles.append(c))
        assert [s.name for s in report.stages] == ["initial", "cycle-1", "final"]
        assert report.total_steps == 3 * tiny_config.steps
        assert cycles == [0]
        assert np.isfinite(report.final_loss)

    def test_expired_deadline(self, line_data, tiny_config):
        model = create_numeric_model(line_data, tiny_config)
        deadline = Deadline(seconds=1e-9, start=0.0)
        with pytest.raises(InvalidRunError) as info:
            train_schedule(model, line_data, tiny_config, deadline=deadline)
        assert info.value.reason is RunFailure.TIMEOUT


class TestDeadline:
    def test_unbounded_never_expires(self):
        Deadline().check()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(basis=BasisKind.RBF, grid=1)
