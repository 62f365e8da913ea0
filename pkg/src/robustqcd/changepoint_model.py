"""Change-point models: post-change laws, uncertainty classes and trajectory generation.

A post-change law maps an observation index ``n`` and change point ``nu``
(``n >= nu >= 1``) to a density. Four structures are supported:

``IID``
    one density for every ``(n, nu)``.
``IPID``
    densities cycling with period ``T`` in absolute time, ``g_{n+T} = g_n``.
``MLRSequence``
    densities indexed by elapsed time ``n - nu``; stored values are used in
    order, then extended linearly by ``step``.
``Tabulated``
    an explicit ``(n, nu) -> density`` table with an optional default.

All densities inside one law share a family, and Gaussian laws share one
variance, so parameters can be evaluated as arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence, Union

import numpy as np

from .distributions import (
    Density,
    kl_divergence,
    llr_law,
    make_density,
    mlr_dominates,
    stochastically_dominates,
)

KL_MIN = 1e-12


def _common_family(densities: Sequence[Density]) -> tuple[str, float]:
    if not densities:
        raise ValueError("a post-change law needs at least one density")
    kinds = {d.kind for d in densities}
    if len(kinds) != 1:
        raise ValueError(f"mixed families in one law: {sorted(kinds)}")
    family = kinds.pop()
    variance = 1.0
    if family == "gaussian":
        variances = {d.variance for d in densities}
        if len(variances) != 1:
            raise ValueError("Gaussian densities in one law must share a variance")
        variance = variances.pop()
    return family, variance


def _check_index(n, nu) -> None:
    if np.any(np.asarray(nu) < 1) or np.any(np.asarray(n) < np.asarray(nu)):
        raise ValueError(f"post-change density requires n >= nu >= 1 (n={n}, nu={nu})")


@dataclass(frozen=True)
class IID:
    density: Density

    structure = "iid"
    nu_invariant = True

    @property
    def family(self) -> str:
        return self.density.kind

    @property
    def variance(self) -> float:
        return getattr(self.density, "variance", 1.0)

    def density_at(self, n: int, nu: int) -> Density:
        _check_index(n, nu)
        return self.density

    def params(self, n, nu):
        _check_index(n, nu)
        return np.broadcast_to(float(self.density.param), np.broadcast(n, nu).shape).astype(float)

    def densities(self) -> tuple[Density, ...]:
        return (self.density,)


@dataclass(frozen=True)
class IPID:
    cycle: tuple[Density, ...]

    structure = "ipid"
    nu_invariant = True

    def __post_init__(self):
        object.__setattr__(self, "cycle", tuple(self.cycle))
        fam, var = _common_family(self.cycle)
        object.__setattr__(self, "_family", fam)
        object.__setattr__(self, "_variance", var)
        object.__setattr__(self, "_params", np.array([d.param for d in self.cycle], dtype=float))

    @property
    def period(self) -> int:
        return len(self.cycle)

    @property
    def family(self) -> str:
        return self._family

    @property
    def variance(self) -> float:
        return self._variance

    def density_at(self, n: int, nu: int) -> Density:
        _check_index(n, nu)
        return self.cycle[(n - 1) % self.period]

    def params(self, n, nu):
        _check_index(n, nu)
        n = np.broadcast_to(np.asarray(n), np.broadcast(n, nu).shape)
        return self._params[(n - 1) % self.period]

    def densities(self) -> tuple[Density, ...]:
        return self.cycle


@dataclass(frozen=True)
class MLRSequence:
    """Densities ``g_1, g_2, ...`` applied at elapsed times ``n - nu = 0, 1, ...``.

    Beyond the stored values the parameter continues linearly with ``step``,
    so ``MLRSequence((Gaussian(0.5),), step=0.1)`` is the ramp ``0.5 + 0.1 k``.
    Consecutive densities must be increasing in MLR order.
    """

    values: tuple[Density, ...]
    step: float = 0.0

    structure = "mlr"
    nu_invariant = False

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        fam, var = _common_family(self.values)
        if self.step < 0:
            raise ValueError("MLR sequence step must be non-negative")
        object.__setattr__(self, "_family", fam)
        object.__setattr__(self, "_variance", var)
        object.__setattr__(self, "_params", np.array([d.param for d in self.values], dtype=float))
        chain = list(self.values)
        if self.step > 0:
            chain.append(self.values[-1].with_param(self.values[-1].param + self.step))
        for lo, hi in zip(chain, chain[1:]):
            if not mlr_dominates(hi, lo):
                raise ValueError(f"MLR sequence not increasing in MLR order: {lo} -> {hi}")

    @classmethod
    def ramp(cls, start: Density, step: float) -> "MLRSequence":
        return cls((start,), step)

    @property
    def family(self) -> str:
        return self._family

    @property
    def variance(self) -> float:
        return self._variance

    def param_at_elapsed(self, k):
        k = np.asarray(k)
        last = len(self._params) - 1
        idx = np.minimum(k, last)
        return self._params[idx] + self.step * np.maximum(k - last, 0)

    def density_at(self, n: int, nu: int) -> Density:
        _check_index(n, nu)
        return make_density(self.family, float(self.param_at_elapsed(n - nu)), self.variance)

    def params(self, n, nu):
        _check_index(n, nu)
        return np.asarray(self.param_at_elapsed(np.asarray(n) - np.asarray(nu)), dtype=float)

    def densities(self) -> tuple[Density, ...]:
        return self.values


@dataclass(frozen=True)
class Tabulated:
    table: Mapping[tuple[int, int], Density]
    default: Density | None = None

    structure = "tabulated"
    nu_invariant = False

    def __post_init__(self):
        table = {(int(n), int(nu)): d for (n, nu), d in dict(self.table).items()}
        for n, nu in table:
            _check_index(n, nu)
        object.__setattr__(self, "table", table)
        members = list(table.values()) + ([self.default] if self.default is not None else [])
        fam, var = _common_family(members)
        object.__setattr__(self, "_family", fam)
        object.__setattr__(self, "_variance", var)

    @property
    def family(self) -> str:
        return self._family

    @property
    def variance(self) -> float:
        return self._variance

    def density_at(self, n: int, nu: int) -> Density:
        _check_index(n, nu)
        d = self.table.get((int(n), int(nu)), self.default)
        if d is None:
            raise KeyError(f"no tabulated density for (n={n}, nu={nu})")
        return d

    def params(self, n, nu):
        n, nu = np.broadcast_arrays(np.asarray(n), np.asarray(nu))
        out = np.empty(n.shape, dtype=float)
        for idx in np.ndindex(n.shape):
            out[idx] = self.density_at(int(n[idx]), int(nu[idx])).param
        return out

    def densities(self) -> tuple[Density, ...]:
        members = tuple(self.table.values())
        return members + ((self.default,) if self.default is not None else ())


PostChangeLaw = Union[IID, IPID, MLRSequence, Tabulated]


def density_at(law: PostChangeLaw, n: int, nu: int) -> Density:
    return law.density_at(n, nu)


# ---------------------------------------------------------------------------
# Uncertainty classes


@dataclass(frozen=True)
class UncertaintyClass:
    """One-sided parametric class: members have parameter ``>= bound(n, nu)``.

    ``schedule`` selects how ``bound`` is read:

    - ``"constant"``: ``bound`` is a number;
    - ``"periodic"``: ``bound`` is a sequence cycled in absolute time ``n``;
    - ``"elapsed"``: ``bound`` is a sequence indexed by ``n - nu``, extended
      linearly by ``step`` past its end;
    - ``"tabulated"``: ``bound`` maps ``(n, nu)`` to a number.
    """

    family: str
    bound: float | tuple[float, ...] | Mapping[tuple[int, int], float]
    schedule: str = "constant"
    pre_change: float = 0.0
    variance: float = 1.0
    step: float = 0.0
    default: float | None = None

    def __post_init__(self):
        if self.family not in ("gaussian", "poisson"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.schedule == "constant":
            values = [float(self.bound)]
        elif self.schedule in ("periodic", "elapsed"):
            object.__setattr__(self, "bound", tuple(float(b) for b in self.bound))
            values = list(self.bound)
            if not values:
                raise ValueError("bound schedule is empty")
        elif self.schedule == "tabulated":
            object.__setattr__(self, "bound", {(int(n), int(nu)): float(b) for (n, nu), b in dict(self.bound).items()})
            values = list(self.bound.values())
        else:
            raise ValueError(f"unknown bound schedule {self.schedule!r}")
        if self.default is not None:
            values.append(self.default)
        if self.step < 0:
            raise ValueError("bound step must be non-negative")
        if min(values) <= self.pre_change:
            raise ValueError(
                f"bounds must exceed the pre-change parameter {self.pre_change}, got min {min(values)}"
            )

    @property
    def pre_change_density(self) -> Density:
        return make_density(self.family, self.pre_change, self.variance)

    def member(self, param: float) -> Density:
        return make_density(self.family, param, self.variance)

    def bound_at(self, n: int, nu: int) -> float:
        _check_index(n, nu)
        if self.schedule == "constant":
            return float(self.bound)
        if self.schedule == "periodic":
            return self.bound[(n - 1) % len(self.bound)]
        if self.schedule == "elapsed":
            k = n - nu
            last = len(self.bound) - 1
            return self.bound[min(k, last)] + self.step * max(k - last, 0)
        b = self.bound.get((n, nu), self.default)
        if b is None:
            raise KeyError(f"no bound for (n={n}, nu={nu})")
        return b

    def contains(self, param: float, n: int, nu: int) -> bool:
        return param >= self.bound_at(n, nu)


def lfl_of(cls: UncertaintyClass) -> PostChangeLaw:
    """Least favorable law of a one-sided class: every index sits at its bound."""
    m = cls.member
    if cls.schedule == "constant":
        return IID(m(cls.bound))
    if cls.schedule == "periodic":
        if len(set(cls.bound)) == 1:
            return IID(m(cls.bound[0]))
        return IPID(tuple(m(b) for b in cls.bound))
    if cls.schedule == "elapsed":
        if len(set(cls.bound)) == 1 and cls.step == 0:
            return IID(m(cls.bound[0]))
        return MLRSequence(tuple(m(b) for b in cls.bound), cls.step)
    table = {key: m(b) for key, b in cls.bound.items()}
    return Tabulated(table, m(cls.default) if cls.default is not None else None)


ProbeSpec = Union[Sequence[float], Callable[[int, int], Iterable[float]]]


def verify_lfl(
    cls: UncertaintyClass,
    candidate: PostChangeLaw,
    probe_params: ProbeSpec,
    index_set: Iterable[tuple[int, int]],
) -> bool:
    """Check the least-favorable ordering of ``candidate`` at the probed indices.

    For each ``(n, nu)`` and each probed class member ``g``, the law of
    ``log gbar(X)/f(X)`` with ``X ~ g`` must stochastically dominate its law
    with ``X ~ gbar``. ``probe_params`` is either a fixed list of member
    parameters or a callable returning the list for a given ``(n, nu)``.

    Raises
    ------
    ValueError
        If a probe lies below the class bound or an index has ``n < nu``.
    """
    f = cls.pre_change_density
    for n, nu in index_set:
        n, nu = int(n), int(nu)
        if n < nu or nu < 1:
            raise ValueError(f"index (n={n}, nu={nu}) is outside n >= nu >= 1")
        probes = list(probe_params(n, nu) if callable(probe_params) else probe_params)
        bound = cls.bound_at(n, nu)
        for p in probes:
            if p < bound:
                raise ValueError(f"probe {p} lies below the class bound {bound} at (n={n}, nu={nu})")
        gbar = candidate.density_at(n, nu)
        if gbar.kind != cls.family or not cls.contains(gbar.param, n, nu):
            return False
        reference = llr_law(gbar, f, gbar)
        for p in probes:
            if not stochastically_dominates(llr_law(gbar, f, cls.member(p)), reference):
                return False
    return True


# ---------------------------------------------------------------------------
# Change-point specifications and models


@dataclass(frozen=True)
class FixedChange:
    nu: int

    def __post_init__(self):
        if self.nu < 1:
            raise ValueError("fixed change point must be >= 1")

    def draw(self, rng) -> float:
        return self.nu


@dataclass(frozen=True)
class GeometricChange:
    rho: float

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError("geometric prior parameter must lie in (0, 1)")

    def pmf(self, n):
        n = np.asarray(n)
        return self.rho * (1 - self.rho) ** (n - 1)

    def draw(self, rng) -> float:
        return int(rng.geometric(self.rho))


@dataclass(frozen=True)
class NoChange:
    def draw(self, rng) -> float:
        return math.inf


ChangePointSpec = Union[FixedChange, GeometricChange, NoChange]


def check_kl_positive(f: Density, law: PostChangeLaw) -> None:
    """Reject laws with a member indistinguishable from ``f``."""
    if law.family != f.kind:
        raise ValueError(f"post-change family {law.family} does not match pre-change {f.kind}")
    members = list(law.densities())
    if isinstance(law, MLRSequence) and law.step > 0:
        # parameters only grow past the stored values, so one extra point suffices
        members.append(law.density_at(len(law.values) + 1, 1))
    for g in members:
        if kl_divergence(g, f) <= KL_MIN:
            raise ValueError(f"post-change density {g} has zero divergence from pre-change {f}")


@dataclass(frozen=True)
class ChangePointModel:
    pre: Density
    law: PostChangeLaw
    change: ChangePointSpec = field(default_factory=NoChange)

    def __post_init__(self):
        check_kl_positive(self.pre, self.law)

    @property
    def family(self) -> str:
        return self.pre.kind

    def params(self, n, nu: float) -> np.ndarray:
        """Generating parameter for each index in ``n`` given realised ``nu``."""
        n = np.asarray(n)
        out = np.full(n.shape, float(self.pre.param))
        if math.isfinite(nu):
            post = n >= nu
            if np.any(post):
                out[post] = self.law.params(n[post], int(nu))
        return out

    def draw_block(self, rng: np.random.Generator, n: np.ndarray, nu: float) -> np.ndarray:
        n = np.asarray(n)
        p = self.params(n, nu)
        if self.family == "gaussian":
            sd = np.where(n >= nu, math.sqrt(self.law.variance), math.sqrt(self.pre.variance))
            return rng.normal(p, sd)
        return rng.poisson(p).astype(float)


def generate_trajectory(model: ChangePointModel, horizon: int, rng: np.random.Generator):
    """Sample ``nu`` from the model's change-point spec, then ``horizon`` observations.

    Returns ``(observations, nu)``, with ``nu = math.inf`` when no change occurs.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    nu = model.change.draw(rng)
    return model.draw_block(rng, np.arange(1, horizon + 1), nu), nu
