"""Rank-based comparison of OFAT error distributions."""

from __future__ import annotations

import itertools
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from scipy import stats

EXACT_LIMIT = 12
BOOTSTRAP_RESAMPLES = 10_000
CI_LEVEL = 0.95


def _as_array(samples: Sequence[float] | np.ndarray) -> np.ndarray:
    arr = np.asarray(samples, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("empty sample")
    return arr


def u_statistic(ref: Sequence[float], other: Sequence[float]) -> float:
    """Pairs with ref above other, ties counting one half."""
    a, b = _as_array(ref), _as_array(other)
    diff = a[:, None] - b[None, :]
    return float(np.sum(diff > 0) + 0.5 * np.sum(diff == 0))


def _exact_lower_p(ranks: np.ndarray, n_ref: int, u_obs: float) -> float:
    offset = n_ref * (n_ref + 1) / 2.0
    hits = total = 0
    for subset in itertools.combinations(range(ranks.size), n_ref):
        u = ranks[list(subset)].sum() - offset
        total += 1
        if u <= u_obs + 1e-9:
            hits += 1
    return hits / total


def mwu_one_sided(ref: Sequence[float], other: Sequence[float]) -> tuple[float, float]:
    """U statistic of ``ref`` and the p-value for "ref tends to be smaller".

    Small samples (n + m <= 12) are enumerated exactly over the pooled
    midranks; larger ones use the tie-corrected normal approximation with a
    continuity correction.
    """
    a, b = _as_array(ref), _as_array(other)
    n, m = a.size, b.size
    u = u_statistic(a, b)
    ranks = stats.rankdata(np.concatenate([a, b]))
    if n + m <= EXACT_LIMIT:
        return u, _exact_lower_p(ranks, n, u)
    total = n + m
    _, counts = np.unique(ranks, return_counts=True)
    ties = float(np.sum(counts**3 - counts))
    var = n * m / 12.0 * ((total + 1) - ties / (total * (total - 1)))
    if var <= 0:
        return u, 1.0
    z = (u + 0.5 - n * m / 2.0) / math.sqrt(var)
    return u, float(stats.norm.cdf(z))


def holm_adjust(p_values: Sequence[float]) -> list[float]:
    """Holm step-down adjustment, returned in input order."""
    p = np.asarray(p_values, dtype=float)
    if p.size == 0:
        return []
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    order = np.argsort(p, kind="stable")
    m = p.size
    adjusted = np.empty(m)
    running = 0.0
    for rank, idx in enumerate(order):
        running = max(running, min(1.0, (m - rank) * p[idx]))
        adjusted[idx] = running
    return adjusted.tolist()


def cliffs_delta(ref: Sequence[float], other: Sequence[float]) -> float:
    """(#ref > other - #ref < other) / (n * m); negative favours ``ref``."""
    a, b = _as_array(ref), _as_array(other)
    diff = a[:, None] - b[None, :]
    return float((np.sum(diff > 0) - np.sum(diff < 0)) / diff.size)


def cliffs_magnitude(delta: float) -> str:
    size = abs(delta)
    if size < 0.147:
        return "negligible"
    if size < 0.33:
        return "small"
    if size < 0.474:
        return "medium"
    return "large"


def bootstrap_median_diff_ci(ref: Sequence[float], other: Sequence[float],
                             resamples: int = BOOTSTRAP_RESAMPLES,
                             level: float = CI_LEVEL,
                             seed: int = 0) -> tuple[float, float]:
    """Percentile CI of median(other*) - median(ref*), groups resampled apart."""
    a, b = _as_array(ref), _as_array(other)
    rng = np.random.default_rng(seed)
    med_a = np.median(a[rng.integers(0, a.size, size=(resamples, a.size))], axis=1)
    med_b = np.median(b[rng.integers(0, b.size, size=(resamples, b.size))], axis=1)
    diff = med_b - med_a
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(diff, [tail, 100.0 - tail])
    return float(lo), float(hi)


def reduction_pct(med_best: float, med_baseline: float) -> float | None:
    """Percent reduction of the best median relative to the baseline median."""
    if not med_baseline > 0:
        return None
    return 100.0 * (1.0 - med_best / med_baseline)


def stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass(frozen=True)
class Summary:
    n: int
    q1: float
    median: float
    q3: float


def summarize(samples: Sequence[float]) -> Summary | None:
    arr = np.asarray(samples, dtype=float)
    if arr.size == 0:
        return None
    q1, med, q3 = np.percentile(arr, [25.0, 50.0, 75.0])
    return Summary(int(arr.size), float(q1), float(np.median(arr)), float(q3))


@dataclass(frozen=True)
class ComparisonRow:
    dataset: str
    best: str
    other: str
    med_best: float
    med_other: float
    u: float
    p_raw: float
    p_holm: float
    cliffs_delta: float
    ci_lo: float
    ci_hi: float

    @property
    def comparison(self) -> str:
        return f"{self.best} vs {self.other}"

    @property
    def stars(self) -> str:
        return stars(self.p_holm)


def best_method(distributions: Mapping[str, Sequence[float]]) -> str | None:
    """Lowest median among non-empty distributions (first listed on ties)."""
    medians = [(float(np.median(v)), n, name)
               for n, (name, v) in enumerate(distributions.items()) if len(v)]
    return min(medians)[2] if medians else None


def compare_dataset(dataset: str, distributions: Mapping[str, Sequence[float]],
                    seed: int = 0,
                    resamples: int = BOOTSTRAP_RESAMPLES) -> list[ComparisonRow]:
    """Best method against every other non-empty method, Holm within the family."""
    best = best_method(distributions)
    if best is None:
        return []
    ref = _as_array(distributions[best])
    partial = []
    for k, (name, samples) in enumerate(distributions.items()):
        if name == best or not len(samples):
            continue
        other = _as_array(samples)
        u, p = mwu_one_sided(ref, other)
        lo, hi = bootstrap_median_diff_ci(ref, other, resamples,
                                          seed=hash_seed(seed, k))
        partial.append((name, other, u, p, cliffs_delta(ref, other), lo, hi))
    adjusted = holm_adjust([row[3] for row in partial])
    return [
        ComparisonRow(dataset, best, name, float(np.median(ref)),
                      float(np.median(other)), u, p, p_adj, delta, lo, hi)
        for (name, other, u, p, delta, lo, hi), p_adj in zip(partial, adjusted)
    ]


def hash_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
