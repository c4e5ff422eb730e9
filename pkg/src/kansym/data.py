"""Task manifests, seeded dataset sampling and train/validation/test splits."""

from __future__ import annotations

import csv
import json
import logging
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError
from pydantic import model_validator

from kansym import expr
from kansym.errors import ConfigError, ExprSyntaxError, ManifestError

logger = logging.getLogger(__name__)

TRAIN_CAP = 2000
TEST_CAP = 1000
MAX_RESAMPLE = 10
BUNDLED_MANIFESTS = ("feynman", "desk")


class VarRange(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = Field(min_length=1)
    lo: float
    hi: float

    @model_validator(mode="after")
    def _ordered(self) -> VarRange:
        if self.lo > self.hi:
            raise ValueError(f"range of {self.name!r} has lo > hi")
        return self


class TaskSpec(BaseModel):
    """One regression target: a formula over named, range-bounded variables."""
    model_config = ConfigDict(frozen=True)

    name: str = Field(min_length=1)
    formula: str
    vars: list[VarRange] = Field(min_length=1)
    provenance: str = ""

    @model_validator(mode="after")
    def _formula_parses(self) -> TaskSpec:
        names = self.variable_names
        if len(set(names)) != len(names):
            raise ValueError("duplicate variable names")
        try:
            expr.parse(self.formula, names)
        except ExprSyntaxError as e:
            raise ValueError(str(e)) from e
        return self

    @property
    def variable_names(self) -> list[str]:
        return [v.name for v in self.vars]

    @property
    def n_inputs(self) -> int:
        return len(self.vars)

    def target(self) -> expr.Expr:
        """The formula with variables renamed to x1..xd."""
        return expr.parse(self.formula, self.variable_names)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return expr.evaluate(self.target(), x)


_TASK_LIST = TypeAdapter(list[TaskSpec])


def _entry_offsets(text: str) -> list[int]:
    """Character offsets of each element of a top-level JSON array."""
    decoder = json.JSONDecoder()
    offsets: list[int] = []
    pos = text.index("[") + 1
    while True:
        while pos < len(text) and text[pos] in " \t\r\n,":
            pos += 1
        if pos >= len(text) or text[pos] == "]":
            return offsets
        offsets.append(pos)
        _, pos = decoder.raw_decode(text, pos)


def _line_col(text: str, offset: int) -> tuple[int, int]:
    line = text.count("\n", 0, offset) + 1
    return line, offset - (text.rfind("\n", 0, offset) + 1) + 1


def parse_manifest(text: str) -> list[TaskSpec]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError(f"invalid JSON: {e.msg}", e.lineno, e.colno) from e
    if not isinstance(data, list):
        raise ManifestError("manifest must be a JSON array of tasks", 1, 1)
    try:
        tasks = _TASK_LIST.validate_python(data)
    except ValidationError as e:
        err = e.errors()[0]
        loc = err["loc"]
        where = ".".join(str(p) for p in loc[1:]) or "entry"
        line = col = None
        if loc and isinstance(loc[0], int):
            line, col = _line_col(text, _entry_offsets(text)[loc[0]])
        raise ManifestError(f"task {loc[0]}: {where}: {err['msg']}", line, col) from e
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ManifestError("duplicate task names in manifest")
    return tasks


def load_manifest(path: str | Path) -> list[TaskSpec]:
    """Load a manifest file, or a bundled one by name ('feynman', 'desk')."""
    path = Path(path)
    if not path.exists() and str(path) in BUNDLED_MANIFESTS:
        text = resources.files("kansym.resources").joinpath(f"{path}.json").read_text()
    elif path.is_file():
        text = path.read_text()
    else:
        raise ManifestError(f"manifest not found: {path}")
    tasks = parse_manifest(text)
    logger.debug("loaded %d tasks from %s", len(tasks), path)
    return tasks


def find_task(tasks: list[TaskSpec], name: str) -> TaskSpec:
    for task in tasks:
        if task.name == name:
            return task
    available = ", ".join(t.name for t in tasks)
    raise ConfigError(f"unknown task {name!r}; available: {available}")


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationSplit:
    x_fit: np.ndarray
    y_fit: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray


@dataclass(frozen=True)
class Dataset:
    """Sampled train/test arrays for one task."""
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    seed: int = 0

    @property
    def n_inputs(self) -> int:
        return int(self.x_train.shape[1])

    def split_validation(self, fraction: float, seed: int) -> ValidationSplit:
        """Hold out a seeded fraction of the training rows.

        With ``fraction == 0`` the validation arrays alias the training rows.
        """
        if not 0.0 <= fraction < 1.0:
            raise ConfigError("validation fraction must lie in [0, 1)")
        n = len(self.y_train)
        n_val = min(max(int(round(fraction * n)), 1), n - 1) if fraction > 0 else 0
        if n_val == 0:
            return ValidationSplit(self.x_train, self.y_train,
                                   self.x_train, self.y_train)
        perm = np.random.default_rng([seed, 1]).permutation(n)
        val, fit = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        return ValidationSplit(
            self.x_train[fit], self.y_train[fit],
            self.x_train[val], self.y_train[val],
        )

    def to_csv(self, path: str | Path, split: str = "train") -> Path:
        x, y = (self.x_train, self.y_train) if split == "train" else (
            self.x_test, self.y_test)
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i + 1}" for i in range(x.shape[1])] + ["y"])
            for row, target in zip(x, y):
                writer.writerow([repr(float(v)) for v in row] + [repr(float(target))])
        return path


def _task_stream(task: TaskSpec, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(task.name.encode())])


def sample_dataset(task: TaskSpec, seed: int, n_train: int = TRAIN_CAP,
                   n_test: int = TEST_CAP,
                   max_retries: int = MAX_RESAMPLE) -> Dataset:
    """Uniform per-variable sampling, then a seeded permutation split."""
    if n_train < 1 or n_test < 0:
        raise ConfigError("need at least one training point")
    rng = _task_stream(task, seed)
    tree = task.target()
    lo = np.array([v.lo for v in task.vars])
    hi = np.array([v.hi for v in task.vars])
    n = n_train + n_test
    x = rng.uniform(lo, hi, size=(n, task.n_inputs))
    y = expr.evaluate(tree, x)
    for _ in range(max_retries):
        bad = ~np.isfinite(y)
        if not bad.any():
            break
        x[bad] = rng.uniform(lo, hi, size=(int(bad.sum()), task.n_inputs))
        y[bad] = expr.evaluate(tree, x[bad])
    if not np.all(np.isfinite(y)):
        raise ConfigError(
            f"task {task.name}: formula is non-finite on sampled points "
            f"after {max_retries} resamples"
        )
    perm = rng.permutation(n)
    train, test = perm[:n_train], perm[n_train:]
    return Dataset(task.name, x[train], y[train], x[test], y[test], seed)


def from_arrays(name: str, x: np.ndarray, y: np.ndarray, x_test: np.ndarray,
                y_test: np.ndarray, seed: int = 0) -> Dataset:
    return Dataset(
        name,
        np.atleast_2d(np.asarray(x, dtype=float)),
        np.asarray(y, dtype=float),
        np.atleast_2d(np.asarray(x_test, dtype=float)),
        np.asarray(y_test, dtype=float),
        seed,
    )
