"""Numeric univariate edge parametrisations: clamped B-splines and Gaussian RBFs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from kansym.errors import ConfigError

DEFAULT_RESOLUTION = 20
DEFAULT_DEGREE = 3
INIT_NOISE = 0.1


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # 0/0 terms of the recursion vanish on repeated knots
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=np.broadcast_to(den != 0, out.shape))
    return out


def fit_grid_range(train_inputs: np.ndarray) -> tuple[float, float]:
    """Global [min, max] over every finite training input."""
    arr = np.asarray(train_inputs, dtype=float)
    finite = arr[np.isfinite(arr)]
    if finite.size == 0:
        raise ConfigError("cannot fit a grid range without finite inputs")
    lo, hi = float(finite.min()), float(finite.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def silu_default(z: np.ndarray) -> np.ndarray:
    return z / (1.0 + np.exp(-z))


@dataclass
class SplineBasis:
    """Clamped B-spline basis of ``resolution`` uniform intervals on [lo, hi].

    There are ``resolution + degree`` basis functions; inputs outside the
    range are clamped to the boundary.
    """
    lo: float
    hi: float
    resolution: int = DEFAULT_RESOLUTION
    degree: int = DEFAULT_DEGREE
    coefficients: np.ndarray = field(default=None)  # type: ignore[assignment]
    knots: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.hi > self.lo:
            raise ConfigError(f"empty grid range [{self.lo}, {self.hi}]")
        if self.resolution < 1 or self.degree < 0:
            raise ConfigError("grid resolution must be >= 1 and degree >= 0")
        grid = np.linspace(self.lo, self.hi, self.resolution + 1)
        self.knots = np.concatenate([
            np.full(self.degree, self.lo), grid, np.full(self.degree, self.hi),
        ])
        if self.coefficients is None:
            self.coefficients = np.zeros(self.n_basis)
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.n_basis,):
            raise ConfigError(
                f"expected {self.n_basis} spline coefficients, "
                f"got {self.coefficients.shape}"
            )

    @property
    def n_basis(self) -> int:
        return self.resolution + self.degree

    @property
    def grid(self) -> np.ndarray:
        return self.knots[self.degree:len(self.knots) - self.degree]

    def _bases(self, x: np.ndarray, degree: int) -> np.ndarray:
        t = self.knots
        xe = x[..., None]
        left, right = t[:-1], t[1:]
        bases = ((xe >= left) & (xe < right)).astype(float)
        last = int(np.nonzero(right > left)[0][-1])
        bases[..., last] = np.where(x == t[-1], 1.0, bases[..., last])
        for k in range(1, degree + 1):
            w_left = _safe_div(xe - t[:-k - 1], t[k:-1] - t[:-k - 1])
            w_right = _safe_div(t[k + 1:] - xe, t[k + 1:] - t[1:-k])
            bases = w_left * bases[..., :-1] + w_right * bases[..., 1:]
        return bases

    def design(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Basis values and their x-derivatives at ``x`` (clamped)."""
        x = np.asarray(x, dtype=float)
        inside = (x >= self.lo) & (x <= self.hi)
        xc = np.clip(x, self.lo, self.hi)
        values = self._bases(xc, self.degree)
        p = self.degree
        if p == 0:
            return values, np.zeros_like(values)
        t = self.knots
        lower = self._bases(xc, p - 1)
        slope = p * (
            _safe_div(lower[..., :-1], t[p:-1] - t[:-p - 1])
            - _safe_div(lower[..., 1:], t[p + 1:] - t[1:-p])
        )
        return values, slope * inside[..., None]

    def evaluate(self, x: np.ndarray | float) -> np.ndarray:
        values, _ = self.design(np.asarray(x, dtype=float))
        return values @ self.coefficients

    def fit(self, xs: np.ndarray, ys: np.ndarray) -> None:
        """Least-squares coefficients for samples (xs, ys)."""
        design, _ = self.design(np.asarray(xs, dtype=float))
        self.coefficients = np.linalg.lstsq(design, ys, rcond=None)[0]

    def init_default(self, rng: np.random.Generator,
                     noise: float = INIT_NOISE) -> None:
        """SiLU-shaped start on the standardised range plus seeded noise."""
        xs = np.linspace(self.lo, self.hi, 4 * self.n_basis)
        z = (xs - 0.5 * (self.lo + self.hi)) / (0.5 * (self.hi - self.lo))
        self.fit(xs, silu_default(z))
        self.coefficients = self.coefficients + noise * rng.standard_normal(
            self.n_basis
        )


@dataclass
class RbfBasis:
    """Gaussian radial basis: sum_i c_i exp(-((x - mu_i) / h)^2)."""
    centres: np.ndarray
    bandwidth: float
    coefficients: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.centres = np.asarray(self.centres, dtype=float)
        if self.bandwidth <= 0:
            raise ConfigError("RBF bandwidth must be positive")
        if self.coefficients is None:
            self.coefficients = np.zeros(self.centres.size)
        self.coefficients = np.asarray(self.coefficients, dtype=float)

    @classmethod
    def uniform(cls, lo: float, hi: float,
                resolution: int = DEFAULT_RESOLUTION) -> RbfBasis:
        if not hi > lo or resolution < 2:
            raise ConfigError("RBF grid needs hi > lo and at least 2 centres")
        centres = np.linspace(lo, hi, resolution)
        return cls(centres=centres, bandwidth=(hi - lo) / (resolution - 1))

    @property
    def n_basis(self) -> int:
        return int(self.centres.size)

    @property
    def lo(self) -> float:
        return float(self.centres[0])

    @property
    def hi(self) -> float:
        return float(self.centres[-1])

    def design(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Basis values and their x-derivatives at ``x`` (clamped to the centres)."""
        x = np.asarray(x, dtype=float)
        inside = (x >= self.lo) & (x <= self.hi)
        u = (np.clip(x, self.lo, self.hi)[..., None] - self.centres) / self.bandwidth
        values = np.exp(-u * u)
        slope = -2.0 * u / self.bandwidth * values
        return values, slope * inside[..., None]

    def evaluate(self, x: np.ndarray | float) -> np.ndarray:
        values, _ = self.design(np.asarray(x, dtype=float))
        return values @ self.coefficients

    def fit(self, xs: np.ndarray, ys: np.ndarray) -> None:
        design, _ = self.design(np.asarray(xs, dtype=float))
        self.coefficients = np.linalg.lstsq(design, ys, rcond=None)[0]

    def init_default(self, rng: np.random.Generator,
                     noise: float = INIT_NOISE) -> None:
        xs = np.linspace(self.lo, self.hi, 4 * self.n_basis)
        z = (xs - 0.5 * (self.lo + self.hi)) / (0.5 * (self.hi - self.lo))
        self.fit(xs, silu_default(z))
        self.coefficients = self.coefficients + noise * rng.standard_normal(
            self.n_basis
        )
