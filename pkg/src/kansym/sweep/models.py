from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from kansym.errors import ConfigError, RunFailure
from kansym.gates import GmpConfig
from kansym.network.train import BasisKind

BUNDLED_PLANS = ("plan_feynman", "plan_desk")


class Pipeline(str, Enum):
    """Enumeration of the five extraction pipelines."""
    AUTOSYM = "autosym"
    FASTKAN_AUTOSYM = "fastkan-autosym"
    GSR = "gsr"
    FASTKAN_GSR = "fastkan-gsr"
    GMP = "gmp"

    @property
    def basis(self) -> BasisKind:
        if self in (Pipeline.FASTKAN_AUTOSYM, Pipeline.FASTKAN_GSR):
            return BasisKind.RBF
        return BasisKind.SPLINE


class Factor(str, Enum):
    """Enumeration of the OFAT factors, in sweep order."""
    WIDTH = "width"
    LAMBDA = "lambda"
    CYCLES = "cycles"
    SEED = "seed"


class RunConfig(BaseModel):
    """One point of the OFAT design."""
    model_config = ConfigDict(frozen=True)

    width: int = Field(ge=1)
    lam: float = Field(ge=0.0)
    cycles: int = Field(ge=0)
    seed: int

    def replace(self, factor: Factor, level: float) -> RunConfig:
        name = {Factor.WIDTH: "width", Factor.LAMBDA: "lam",
                Factor.CYCLES: "cycles", Factor.SEED: "seed"}[factor]
        return self.model_copy(update={name: level})

    @property
    def key(self) -> tuple[int, float, int, int]:
        return (self.width, self.lam, self.cycles, self.seed)


class PlannedRun(BaseModel):
    model_config = ConfigDict(frozen=True)

    factor: Factor
    config: RunConfig


REFERENCE = RunConfig(width=5, lam=1e-2, cycles=3, seed=1)


class SweepPlan(BaseModel):
    """OFAT factor levels around a reference, plus the shared run budget."""
    model_config = ConfigDict(frozen=True)

    manifest: str = "feynman"
    datasets: list[str] | None = None
    pipelines: list[Pipeline] = Field(default_factory=lambda: list(Pipeline))
    widths: list[int] = Field(default_factory=lambda: [5, 10, 20, 50, 100])
    lambdas: list[float] = Field(default_factory=lambda: [1e-4, 1e-3, 1e-2, 1e-1])
    cycles: list[int] = Field(default_factory=lambda: [1, 3, 5])
    seeds: list[int] = Field(default_factory=lambda: [1, 2, 3])
    reference: RunConfig = REFERENCE
    n_mult: int = Field(2, ge=0)
    n_train: int = Field(2000, ge=1)
    n_test: int = Field(1000, ge=1)
    steps: int = Field(200, ge=0)
    grid: int = Field(20, ge=2)
    tau: int = Field(100, ge=0)
    gmp: GmpConfig = Field(default_factory=GmpConfig)
    time_limit: float | None = Field(600.0, gt=0.0)
    record_timing: bool = False
    master_seed: int = 0

    def levels(self, factor: Factor) -> list:
        return {Factor.WIDTH: self.widths, Factor.LAMBDA: self.lambdas,
                Factor.CYCLES: self.cycles, Factor.SEED: self.seeds}[factor]


def enumerate_ofat(plan: SweepPlan) -> list[PlannedRun]:
    """One run per factor level with every other factor at the reference."""
    runs = []
    for factor in Factor:
        levels = plan.levels(factor)
        ref_level = plan.reference.model_dump()["lam" if factor is Factor.LAMBDA
                                                else factor.value]
        if ref_level not in levels:
            raise ConfigError(
                f"reference {factor.value}={ref_level} is not among its levels {levels}"
            )
        runs.extend(
            PlannedRun(factor=factor, config=plan.reference.replace(factor, level))
            for level in levels
        )
    return runs


def unique_configs(runs: list[PlannedRun]) -> list[RunConfig]:
    seen: dict[tuple, RunConfig] = {}
    for run in runs:
        seen.setdefault(run.config.key, run.config)
    return list(seen.values())


def parse_plan(text: str) -> SweepPlan:
    try:
        plan = SweepPlan.model_validate(json.loads(text))
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid plan JSON at line {e.lineno}: {e.msg}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid plan: {e}") from e
    enumerate_ofat(plan)
    return plan


def load_plan(path: str | Path) -> SweepPlan:
    """Load a plan file, or a bundled plan by name."""
    path = Path(path)
    if not path.exists() and str(path) in BUNDLED_PLANS:
        return parse_plan(
            resources.files("kansym.resources").joinpath(f"{path}.json").read_text()
        )
    if not path.is_file():
        raise ConfigError(f"plan not found: {path}")
    return parse_plan(path.read_text())


class RunResult(BaseModel):
    """Outcome of one (dataset, pipeline, configuration) run."""
    dataset: str
    pipeline: Pipeline
    factor: Factor
    width: int
    lam: float
    cycles: int
    seed: int
    test_mse: float | None = None
    valid: bool = False
    reason: RunFailure | None = None
    expression: str = ""
    wall_ms: float = 0.0

    @property
    def config(self) -> RunConfig:
        return RunConfig(width=self.width, lam=self.lam, cycles=self.cycles,
                         seed=self.seed)

    @property
    def key(self) -> tuple:
        return (self.dataset, self.pipeline.value, *self.config.key)


@dataclass
class OfatDistribution:
    """Valid test errors of one pipeline on one dataset across the sweep."""
    dataset: str
    pipeline: Pipeline
    samples: list[float] = field(default_factory=list)
    n_invalid: int = 0

    @property
    def empty(self) -> bool:
        return not self.samples


@dataclass
class SeedSpread:
    mean: float | None
    std: float | None
    n_valid: int
    n_runs: int

    @property
    def dagger(self) -> bool:
        """Fewer than three valid seeds behind the figure."""
        return self.n_valid < 3
