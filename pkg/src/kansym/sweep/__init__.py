from kansym.sweep.ledger import ResultLedger, read_results, write_results
from kansym.sweep.models import (
    Factor,
    Pipeline,
    RunConfig,
    RunResult,
    SweepPlan,
    enumerate_ofat,
    load_plan,
)
from kansym.sweep.runner import (
    build_distributions,
    run_sweep,
    seed_sensitivity,
    structural_consistency,
)

__all__ = [
    "Factor",
    "Pipeline",
    "ResultLedger",
    "RunConfig",
    "RunResult",
    "SweepPlan",
    "build_distributions",
    "enumerate_ofat",
    "load_plan",
    "read_results",
    "run_sweep",
    "seed_sensitivity",
    "structural_consistency",
    "write_results",
]
