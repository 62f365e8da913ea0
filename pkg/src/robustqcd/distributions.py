"""Scalar Gaussian and Poisson densities, log-likelihood ratios and ordering checks.

Two families are supported, each as a frozen dataclass. Laws of derived
statistics (the log-likelihood ratio of a fixed design pair under some data
density) are represented by :class:`NormalLaw`, :class:`AffinePoissonLaw` or
:class:`EmpiricalLaw`, all of which expose a survival function
``P(Z >= t)`` used by :func:`stochastically_dominates`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy import stats
from scipy.special import gammaln

LOG_2PI = math.log(2.0 * math.pi)
DOMINANCE_TOL = 1e-9
DEFAULT_GRID_POINTS = 400
EMPIRICAL_SAMPLES = 100_000


@dataclass(frozen=True)
class Gaussian:
    mean: float
    variance: float = 1.0

    def __post_init__(self):
        if not (self.variance > 0 and math.isfinite(self.variance)):
            raise ValueError(f"Gaussian variance must be positive, got {self.variance}")
        if not math.isfinite(self.mean):
            raise ValueError(f"Gaussian mean must be finite, got {self.mean}")

    kind = "gaussian"

    @property
    def param(self) -> float:
        return self.mean

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def with_param(self, value: float) -> "Gaussian":
        return Gaussian(value, self.variance)


@dataclass(frozen=True)
class Poisson:
    rate: float

    def __post_init__(self):
        if not (self.rate > 0 and math.isfinite(self.rate)):
            raise ValueError(f"Poisson rate must be positive, got {self.rate}")

    kind = "poisson"

    @property
    def param(self) -> float:
        return self.rate

    @property
    def mean(self) -> float:
        return self.rate

    @property
    def variance(self) -> float:
        return self.rate

    @property
    def std(self) -> float:
        return math.sqrt(self.rate)

    def with_param(self, value: float) -> "Poisson":
        return Poisson(value)


Density = Union[Gaussian, Poisson]


def make_density(family: str, param: float, variance: float = 1.0) -> Density:
    if family == "gaussian":
        return Gaussian(float(param), float(variance))
    if family == "poisson":
        return Poisson(float(param))
    raise ValueError(f"unknown family {family!r}")


def _check_same_kind(*densities: Density) -> None:
    kinds = {d.kind for d in densities}
    if len(kinds) != 1:
        raise TypeError(f"densities must share a family, got {sorted(kinds)}")


def check_counts(x) -> np.ndarray:
    """Validate Poisson observations: non-negative integers (any numeric dtype)."""
    arr = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr != np.floor(arr)):
        raise ValueError("Poisson observations must be non-negative integers")
    return arr


def log_density(d: Density, x):
    """Log density (Gaussian) or log mass (Poisson) at ``x``; vectorised over ``x``."""
    if isinstance(d, Gaussian):
        arr = np.asarray(x, dtype=float)
        out = -0.5 * (LOG_2PI + math.log(d.variance)) - (arr - d.mean) ** 2 / (2 * d.variance)
    else:
        arr = check_counts(x)
        out = arr * math.log(d.rate) - d.rate - gammaln(arr + 1)
    return float(out) if np.ndim(out) == 0 else out


def llr_params(family: str, g_param, f: Density, x, g_variance: float = 1.0):
    """Vectorised ``log g(x)/f(x)`` where ``g`` is given by parameter array(s).

    ``g_param`` and ``x`` broadcast against each other. Observations are not
    validated here; callers check Poisson counts once up front.
    """
    g_param = np.asarray(g_param, dtype=float)
    x = np.asarray(x, dtype=float)
    if family == "gaussian":
        return (
            (x - f.mean) ** 2 / (2 * f.variance)
            - (x - g_param) ** 2 / (2 * g_variance)
            + 0.5 * math.log(f.variance / g_variance)
        )
    return x * np.log(g_param / f.rate) - g_param + f.rate


def llr(g: Density, f: Density, x):
    """Log-likelihood ratio ``log g(x) - log f(x)``."""
    _check_same_kind(g, f)
    if isinstance(g, Poisson):
        check_counts(x)
    out = llr_params(g.kind, g.param, f, x, getattr(g, "variance", 1.0))
    return float(out) if np.ndim(out) == 0 else out


def kl_divergence(g: Density, f: Density) -> float:
    """Closed-form ``D(g || f)``."""
    _check_same_kind(g, f)
    if isinstance(g, Gaussian):
        return 0.5 * (
            math.log(f.variance / g.variance)
            + (g.variance + (g.mean - f.mean) ** 2) / f.variance
            - 1.0
        )
    return g.rate * math.log(g.rate / f.rate) - g.rate + f.rate


def sample(d: Density, rng: np.random.Generator, size=None):
    """Draw i.i.d. samples from ``d`` using the supplied generator."""
    if isinstance(d, Gaussian):
        return rng.normal(d.mean, d.std, size=size)
    out = rng.poisson(d.rate, size=size)
    return out.astype(float) if size is not None else float(out)


# ---------------------------------------------------------------------------
# Laws of derived scalar statistics


@dataclass(frozen=True)
class NormalLaw:
    mean: float
    variance: float

    def survival(self, t):
        return stats.norm.sf(t, loc=self.mean, scale=math.sqrt(self.variance))

    def sample(self, rng, size):
        return rng.normal(self.mean, math.sqrt(self.variance), size=size)

    def support_span(self):
        s = math.sqrt(self.variance)
        return self.mean - 8 * s, self.mean + 8 * s


@dataclass(frozen=True)
class AffinePoissonLaw:
    """Law of ``scale * K + shift`` with ``K ~ Poisson(rate)`` and ``scale > 0``."""

    rate: float
    scale: float = 1.0
    shift: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("affine Poisson law needs a positive scale")
        if not self.rate > 0:
            raise ValueError("affine Poisson law needs a positive rate")

    def survival(self, t):
        t = np.asarray(t, dtype=float)
        # smallest k with scale*k + shift >= t, with slack for values on the lattice
        k = np.ceil((t - self.shift) / self.scale - 1e-9)
        out = np.where(k <= 0, 1.0, stats.poisson.sf(k - 1, self.rate))
        return float(out) if out.ndim == 0 else out

    def sample(self, rng, size):
        return self.scale * rng.poisson(self.rate, size=size) + self.shift

    def k_max(self) -> int:
        return int(math.ceil(self.rate + 20 * math.sqrt(self.rate) + 20))

    def support_points(self, k_max: int) -> np.ndarray:
        return self.scale * np.arange(k_max + 1) + self.shift


@dataclass(frozen=True, eq=False)
class EmpiricalLaw:
    samples: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "samples", np.sort(np.asarray(self.samples, dtype=float)))

    def survival(self, t):
        t = np.asarray(t, dtype=float)
        n = self.samples.size
        out = (n - np.searchsorted(self.samples, t, side="left")) / n
        return float(out) if out.ndim == 0 else out

    def sample(self, rng, size):
        return rng.choice(self.samples, size=size, replace=True)

    def support_span(self):
        return float(self.samples[0]), float(self.samples[-1])


ScalarLaw = Union[NormalLaw, AffinePoissonLaw, EmpiricalLaw]


def law_of(d: Density) -> ScalarLaw:
    """Law of the observation itself under ``d``."""
    if isinstance(d, Gaussian):
        return NormalLaw(d.mean, d.variance)
    return AffinePoissonLaw(d.rate)


def llr_law(g_eval: Density, f: Density, under: Density, rng=None) -> ScalarLaw:
    """Law of ``llr(g_eval, f, X)`` when ``X ~ under``.

    Closed forms exist when the ratio is affine in ``X`` with positive slope on
    the Poisson lattice: equal-variance Gaussians and Poisson pairs with
    ``g_eval.rate > f.rate``. Anything else falls back to an empirical law
    built from ``EMPIRICAL_SAMPLES`` draws.
    """
    _check_same_kind(g_eval, f, under)
    if isinstance(g_eval, Gaussian):
        if g_eval.variance == f.variance:
            slope = (g_eval.mean - f.mean) / f.variance
            intercept = (f.mean**2 - g_eval.mean**2) / (2 * f.variance)
            return NormalLaw(slope * under.mean + intercept, slope**2 * under.variance)
    else:
        slope = math.log(g_eval.rate / f.rate)
        if slope > 0:
            return AffinePoissonLaw(under.rate, slope, f.rate - g_eval.rate)
    rng = rng if rng is not None else np.random.default_rng(0)
    x = sample(under, rng, size=EMPIRICAL_SAMPLES)
    return EmpiricalLaw(llr(g_eval, f, x))


def default_grid(a: ScalarLaw, b: ScalarLaw, n_points: int = DEFAULT_GRID_POINTS) -> np.ndarray:
    """Evaluation grid for survival comparisons of two laws.

    Two affine Poisson laws on the same lattice are compared at every lattice
    point up to the tail cut-off, which is exact since both survival functions
    are constant between lattice points.
    """
    if isinstance(a, AffinePoissonLaw) and isinstance(b, AffinePoissonLaw):
        k_max = max(a.k_max(), b.k_max())
        pts = np.concatenate([a.support_points(k_max), b.support_points(k_max)])
        return np.unique(pts)
    spans = []
    for law in (a, b):
        if isinstance(law, AffinePoissonLaw):
            spans.append((law.shift, law.shift + law.scale * law.k_max()))
        else:
            spans.append(law.support_span())
    lo = min(s[0] for s in spans)
    hi = max(s[1] for s in spans)
    return np.linspace(lo, hi, n_points)


def stochastically_dominates(
    a: ScalarLaw,
    b: ScalarLaw,
    grid: Sequence[float] | None = None,
    tol: float = DOMINANCE_TOL,
) -> bool:
    """True iff ``P_a(Z >= t) >= P_b(Z >= t) - tol`` at every grid point."""
    if grid is None:
        grid = default_grid(a, b)
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("grid must be non-empty")
    return bool(np.all(np.asarray(a.survival(grid)) >= np.asarray(b.survival(grid)) - tol))


def density_grid(f: Density, g: Density, n_points: int = DEFAULT_GRID_POINTS) -> np.ndarray:
    _check_same_kind(f, g)
    if isinstance(f, Gaussian):
        lo = min(f.mean - 8 * f.std, g.mean - 8 * g.std)
        hi = max(f.mean + 8 * f.std, g.mean + 8 * g.std)
        return np.linspace(lo, hi, n_points)
    top = max(f.rate, g.rate)
    return np.arange(int(math.ceil(top + 20 * math.sqrt(top) + 20)) + 1, dtype=float)


def mlr_dominates(f: Density, g: Density, grid: Sequence[float] | None = None) -> bool:
    """True iff ``f(x)/g(x)`` is non-decreasing over the grid.

    Works with log ratios; grid points where either density underflows to zero
    are dropped.
    """
    _check_same_kind(f, g)
    grid = density_grid(f, g) if grid is None else np.asarray(grid, dtype=float)
    lf = np.asarray(log_density(f, grid), dtype=float)
    lg = np.asarray(log_density(g, grid), dtype=float)
    keep = np.isfinite(lf) & np.isfinite(lg) & (lf > -700) & (lg > -700)
    ratio = (lf - lg)[keep]
    if ratio.size < 2:
        return True
    slack = 1e-10 * max(1.0, float(np.max(np.abs(ratio))))
    return bool(np.all(np.diff(ratio) >= -slack))
