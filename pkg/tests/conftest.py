from __future__ import annotations

import numpy as np
import pytest

from kansym.data import Dataset, find_task, from_arrays, load_manifest, sample_dataset
from kansym.network.train import TrainConfig


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture()
def desk_tasks():
    """The two bundled synthetic tasks."""
    return load_manifest("desk")


@pytest.fixture()
def product_data(desk_tasks) -> Dataset:
    """Small sample of x1*x2 on [-2, 2]^2."""
    return sample_dataset(find_task(desk_tasks, "product"), seed=3,
                          n_train=48, n_test=24)


@pytest.fixture()
def line_data() -> Dataset:
    """One-input dataset for y = 2x + 1, exactly representable."""
    x = np.linspace(-1.0, 1.0, 40)[:, None]
    x_test = np.linspace(-0.9, 0.9, 10)[:, None]
    return from_arrays("line", x, 2.0 * x[:, 0] + 1.0, x_test,
                       2.0 * x_test[:, 0] + 1.0)


@pytest.fixture()
def tiny_config() -> TrainConfig:
    """Enough to exercise the schedule without real optimisation."""
    return TrainConfig(width=2, n_mult=1, cycles=1, steps=5, grid=4,
                       val_fraction=0.0, seed=1)
