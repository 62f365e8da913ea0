"""Streaming CUSUM and Shiryaev detectors, classical and generalized.

Each detector consumes one observation per :meth:`Detector.step` call and
tracks the first time its statistic reaches the threshold schedule
(boundary-inclusive). Stepping past the stopping time keeps updating the
statistic but never moves ``tau``.

The generalized detectors keep one log-likelihood accumulator per candidate
change point ``k``::

    S_k(n) = sum_{i=k}^{n} log gbar_{i,k}(X_i) / f(X_i)

CUSUM reports ``max(0, max_k S_k(n))``; Shiryaev combines
``rho (1-rho)^(k-1-n) exp(S_k(n))`` with log-sum-exp. When the design law
does not depend on the change point (i.i.d. or periodic), every accumulator
receives the same increment and both statistics reduce to O(1) recursions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .changepoint_model import IID, IPID, PostChangeLaw, check_kl_positive
from .distributions import Density, check_counts, llr_params

KINDS = ("cusum", "shiryaev", "gen_cusum", "gen_shiryaev")
UNLIMITED_WINDOW_MAX = 10_000


@dataclass(frozen=True)
class ThresholdSchedule:
    """Threshold per time index: constant, periodic, or explicit (last value repeated)."""

    shape: str
    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.shape not in ("constant", "periodic", "explicit"):
            raise ValueError(f"unknown threshold shape {self.shape!r}")
        if not self.values:
            raise ValueError("threshold schedule has no values")
        if self.shape == "constant" and len(self.values) != 1:
            raise ValueError("constant threshold takes exactly one value")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("threshold values must be finite")

    @classmethod
    def constant(cls, value: float) -> "ThresholdSchedule":
        return cls("constant", (value,))

    @classmethod
    def periodic(cls, values: Sequence[float]) -> "ThresholdSchedule":
        return cls("periodic", tuple(values))

    @classmethod
    def explicit(cls, values: Sequence[float]) -> "ThresholdSchedule":
        return cls("explicit", tuple(values))

    @classmethod
    def coerce(cls, value) -> "ThresholdSchedule":
        if isinstance(value, ThresholdSchedule):
            return value
        return cls.constant(float(value))

    def at(self, n):
        """Threshold at 1-based index ``n`` (scalar or array)."""
        vals = np.asarray(self.values)
        n = np.asarray(n)
        if self.shape == "constant":
            out = np.broadcast_to(vals[0], n.shape)
        elif self.shape == "periodic":
            out = vals[(n - 1) % len(vals)]
        else:
            out = vals[np.minimum(n - 1, len(vals) - 1)]
        return float(out) if out.ndim == 0 else np.asarray(out, dtype=float)

    def scaled(self, shift: float) -> "ThresholdSchedule":
        return ThresholdSchedule(self.shape, tuple(v + shift for v in self.values))


def posterior_to_odds(p: float) -> float:
    """Posterior change probability ``p`` as Shiryaev odds ``p / (1 - p)``."""
    if not 0 <= p < 1:
        raise ValueError("posterior target must lie in [0, 1)")
    return p / (1 - p)


def odds_to_posterior(r: float) -> float:
    return r / (1 + r)


@dataclass(frozen=True)
class DetectorSpec:
    kind: str
    pre: Density
    design: PostChangeLaw
    threshold: ThresholdSchedule
    rho: float | None = None
    window: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown detector kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "threshold", ThresholdSchedule.coerce(self.threshold))
        if self.kind in ("shiryaev", "gen_shiryaev"):
            if self.rho is None or not 0 < self.rho < 1:
                raise ValueError("Shiryaev detectors need rho in (0, 1)")
        if self.kind in ("cusum", "shiryaev") and not isinstance(self.design, IID):
            raise ValueError(f"{self.kind} needs an i.i.d. design law; use gen_{self.kind}")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1 or None")
        if (
            self.threshold.shape == "periodic"
            and isinstance(self.design, IPID)
            and len(self.threshold.values) != self.design.period
        ):
            raise ValueError("periodic threshold length must equal the design law's period")
        check_kl_positive(self.pre, self.design)

    @property
    def family(self) -> str:
        return self.pre.kind

    @property
    def is_shiryaev(self) -> bool:
        return self.kind in ("shiryaev", "gen_shiryaev")

    @property
    def recursive(self) -> bool:
        """Whether the statistic has an exact O(1) recursion."""
        if not self.design.nu_invariant:
            return False
        return not (self.kind == "gen_shiryaev" and self.window is not None)

    def with_threshold(self, threshold) -> "DetectorSpec":
        return DetectorSpec(self.kind, self.pre, self.design, threshold, self.rho, self.window)

    def llr_at(self, n, x):
        """``log gbar_n(x)/f(x)`` for a change-point-invariant design law."""
        params = self.design.params(n, 1)
        return llr_params(self.family, params, self.pre, x, self.design.variance)


class Detector:
    """Base streaming detector; subclasses implement :meth:`_update`."""

    def __init__(self, spec: DetectorSpec):
        self.spec = spec
        self.n = 0
        self.stopped = False
        self.tau: int | None = None

    def _crossed(self, n: int) -> bool:
        raise NotImplementedError

    def _update(self, x: float) -> None:
        raise NotImplementedError

    @property
    def statistic(self) -> float:
        raise NotImplementedError

    def step(self, x: float) -> float:
        if self.spec.family == "poisson":
            check_counts(x)
        elif not math.isfinite(x):
            raise ValueError(f"observation must be finite, got {x}")
        self.n += 1
        self._update(float(x))
        if not self.stopped and self._crossed(self.n):
            self.stopped = True
            self.tau = self.n
        return self.statistic


class _CusumBase(Detector):
    def _crossed(self, n):
        return self.statistic >= self.spec.threshold.at(n)


class _ShiryaevBase(Detector):
    log_r: float

    @property
    def statistic(self) -> float:
        return math.exp(self.log_r) if self.log_r < 709 else math.inf

    @property
    def posterior(self) -> float:
        return odds_to_posterior(self.statistic)

    def _crossed(self, n):
        a = self.spec.threshold.at(n)
        return a <= 0 or self.log_r >= math.log(a)


class CusumDetector(_CusumBase):
    """Page's recursion ``W_n = max(0, W_{n-1} + Z_n)``; also serves the
    generalized CUSUM when the design law is change-point invariant."""

    def __init__(self, spec: DetectorSpec):
        super().__init__(spec)
        self.w = 0.0
        self.raw = -math.inf

    def _update(self, x):
        z = float(self.spec.llr_at(self.n, x))
        self.raw = z + max(0.0, self.raw)
        self.w = max(0.0, self.w + z)

    @property
    def statistic(self) -> float:
        return self.w


class ShiryaevDetector(_ShiryaevBase):
    """Odds recursion ``R_n = (R_{n-1} + rho) / (1 - rho) * L_n`` in log space."""

    def __init__(self, spec: DetectorSpec):
        super().__init__(spec)
        self.log_r = -math.inf
        self._log_rho = math.log(spec.rho)
        self._log_1m = math.log1p(-spec.rho)

    def _update(self, x):
        z = float(self.spec.llr_at(self.n, x))
        self.log_r = float(np.logaddexp(self.log_r, self._log_rho)) - self._log_1m + z


class _AccumulatorMixin:
    """Per-candidate accumulators ``S_k(n)`` for change-point dependent laws."""

    def _init_accumulators(self):
        self.ks = np.empty(0, dtype=np.int64)
        self.sums = np.empty(0, dtype=float)

    def _accumulate(self, x):
        spec = self.spec
        if spec.window is None and self.n > UNLIMITED_WINDOW_MAX:
            raise RuntimeError(
                f"unlimited window exceeds {UNLIMITED_WINDOW_MAX} samples; set a finite window"
            )
        self.ks = np.append(self.ks, self.n)
        self.sums = np.append(self.sums, 0.0)
        params = spec.design.params(self.n, self.ks)
        self.sums = self.sums + llr_params(spec.family, params, spec.pre, x, spec.design.variance)

    def _prune(self, scores):
        w = self.spec.window
        if w is None or self.ks.size <= w:
            return
        keep = self.ks > self.n - w
        keep[int(np.argmax(scores))] = True
        self.ks = self.ks[keep]
        self.sums = self.sums[keep]


class GeneralizedCusumDetector(_CusumBase, _AccumulatorMixin):
    def __init__(self, spec: DetectorSpec):
        super().__init__(spec)
        self._init_accumulators()
        self.raw = -math.inf

    def _update(self, x):
        self._accumulate(x)
        self.raw = float(self.sums.max())
        self._prune(self.sums)

    @property
    def statistic(self) -> float:
        return max(0.0, self.raw)


class GeneralizedShiryaevDetector(_ShiryaevBase, _AccumulatorMixin):
    def __init__(self, spec: DetectorSpec):
        super().__init__(spec)
        self._init_accumulators()
        self.log_r = -math.inf
        self._log_rho = math.log(spec.rho)
        self._log_1m = math.log1p(-spec.rho)

    def _update(self, x):
        self._accumulate(x)
        terms = self._log_rho + (self.ks - 1 - self.n) * self._log_1m + self.sums
        self.log_r = float(logsumexp(terms))
        self._prune(terms)


def make_detector(spec: DetectorSpec) -> Detector:
    if spec.kind in ("cusum", "gen_cusum"):
        return CusumDetector(spec) if spec.recursive else GeneralizedCusumDetector(spec)
    return ShiryaevDetector(spec) if spec.recursive else GeneralizedShiryaevDetector(spec)


def run_detector(spec: DetectorSpec, observations: Iterable[float]):
    """Run ``spec`` over every observation.

    Returns
    -------
    tau : int or None
        First index (1-based) with statistic >= threshold.
    trajectory : numpy.ndarray
        Statistic after each observation.
    """
    det = make_detector(spec)
    traj = [det.step(x) for x in observations]
    return det.tau, np.asarray(traj, dtype=float)


def write_trajectory_csv(path, trajectory: Sequence[float], threshold: ThresholdSchedule, tau: int | None):
    """Columns ``n, statistic, threshold, stopped``; ``stopped`` is 1 from ``tau`` on."""
    threshold = ThresholdSchedule.coerce(threshold)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "statistic", "threshold", "stopped"])
        for n, s in enumerate(trajectory, start=1):
            w.writerow([n, repr(float(s)), repr(threshold.at(n)), int(tau is not None and n >= tau)])
