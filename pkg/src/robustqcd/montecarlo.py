"""Monte Carlo estimation of false-alarm and delay metrics.

Every trial ``i`` draws from its own generator derived from ``(seed, i)``,
so results do not depend on how trials are grouped or parallelised. A
trial first draws its change point, then observations in blocks whose
boundaries are fixed in absolute time.

Detectors with an exact recursion (classical CUSUM/Shiryaev and the
generalized versions over change-point invariant design laws) are run
vectorised across trials; other detectors step through a streaming
:class:`~robustqcd.detectors.Detector` per trial.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .changepoint_model import ChangePointModel, FixedChange, GeometricChange, NoChange
from .detectors import DetectorSpec, ThresholdSchedule, make_detector
from .distributions import kl_divergence

Z95 = 1.959963984540054
Z95_ONE_SIDED = 1.6448536269514722
JOBS_ENV = "ROBUSTQCD_JOBS"
TRIAL_CHUNK = 2048
MAX_BLOCK = 512
MIN_TRIALS_NO_WARN = 200


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial,)))


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def _block_bounds(horizon: int):
    """Yield ``(start, stop)`` of successive blocks (1-based, inclusive start)."""
    start, size = 1, 64
    while start <= horizon:
        stop = min(start + size - 1, horizon)
        yield start, stop
        start = stop + 1
        size = min(2 * size, MAX_BLOCK)


@dataclass
class Outcomes:
    """Per-trial results. ``tau`` is 0 for trials that never stopped."""

    tau: np.ndarray
    nu: np.ndarray
    horizon: np.ndarray

    @property
    def stopped(self) -> np.ndarray:
        return self.tau > 0

    @property
    def censored(self) -> np.ndarray:
        return ~self.stopped

    def run_length(self) -> np.ndarray:
        """Stopping time with unstopped trials counted at their horizon."""
        return np.where(self.stopped, self.tau, self.horizon)


def _simulate_vectorised(spec, model, nus, rngs, horizons):
    m = len(rngs)
    tau = np.zeros(m, dtype=np.int64)
    active = horizons >= 1
    shiryaev = spec.is_shiryaev
    state = np.full(m, -np.inf) if shiryaev else np.zeros(m)
    if shiryaev:
        log_rho, log_1m = math.log(spec.rho), math.log1p(-spec.rho)
    hmax = int(horizons.max()) if m else 0
    for start, stop in _block_bounds(hmax):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        n = np.arange(start, stop + 1)
        x = np.stack([model.draw_block(rngs[i], n, nus[i]) for i in idx])
        z = spec.llr_at(n[None, :], x)
        thr = np.broadcast_to(spec.threshold.at(n), z.shape)
        if shiryaev:
            stat = np.empty_like(z)
            lr = state[idx]
            for j in range(z.shape[1]):
                lr = np.logaddexp(lr, log_rho) - log_1m + z[:, j]
                stat[:, j] = lr
            with np.errstate(divide="ignore"):
                crossed = (thr <= 0) | (stat >= np.log(np.where(thr > 0, thr, 1.0)))
        else:
            s = np.cumsum(z, axis=1)
            stat = s - np.minimum(-state[idx][:, None], np.minimum.accumulate(s, axis=1))
            crossed = stat >= thr
        crossed &= n[None, :] <= horizons[idx][:, None]
        hit = crossed.any(axis=1)
        tau[idx[hit]] = start + crossed[hit].argmax(axis=1)
        state[idx] = stat[:, -1]
        active[idx[hit]] = False
        active[idx[horizons[idx] <= stop]] = False
    return tau


def _simulate_streaming(spec, model, nus, rngs, horizons):
    tau = np.zeros(len(rngs), dtype=np.int64)
    for t, (rng, nu, h) in enumerate(zip(rngs, nus, horizons)):
        det = make_detector(spec)
        for start, stop in _block_bounds(int(h)):
            for x in model.draw_block(rng, np.arange(start, stop + 1), nu):
                det.step(x)
                if det.stopped:
                    break
            if det.stopped:
                tau[t] = det.tau
                break
    return tau


def _simulate_chunk(spec, model, trials, horizon, seed, stop_at_change):
    rngs = [trial_rng(seed, int(i)) for i in trials]
    nus = np.array([model.change.draw(r) for r in rngs], dtype=float)
    horizons = np.full(len(rngs), horizon, dtype=np.int64)
    if stop_at_change:
        # only whether tau < nu matters; nu - 1 is always finite for geometric priors
        horizons = np.minimum(horizons, np.where(np.isfinite(nus), nus - 1, horizon)).astype(np.int64)
    run = _simulate_vectorised if spec.recursive else _simulate_streaming
    tau = np.zeros(len(rngs), dtype=np.int64)
    for lo in range(0, len(rngs), TRIAL_CHUNK):
        sl = slice(lo, lo + TRIAL_CHUNK)
        tau[sl] = run(spec, model, nus[sl], rngs[sl], horizons[sl])
    return tau, nus, horizons


def simulate(
    spec: DetectorSpec,
    model: ChangePointModel,
    trials: int,
    horizon: int,
    seed: int,
    stop_at_change: bool = False,
    n_jobs: int | None = None,
) -> Outcomes:
    """Run ``trials`` independent detector runs against data from ``model``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if spec.family != model.family:
        raise ValueError("detector and model families differ")
    n_jobs = default_jobs() if n_jobs is None else max(1, int(n_jobs))
    ids = np.arange(trials)
    if n_jobs == 1 or trials < 2 * n_jobs:
        parts = [_simulate_chunk(spec, model, ids, horizon, seed, stop_at_change)]
    else:
        pieces = np.array_split(ids, n_jobs)
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            futs = [ex.submit(_simulate_chunk, spec, model, p, horizon, seed, stop_at_change) for p in pieces]
            parts = [f.result() for f in futs]
    tau, nus, hz = (np.concatenate(a) for a in zip(*parts))
    return Outcomes(tau, nus, hz)


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class RunMetrics:
    metric: str
    estimate: float | None
    half_width: float | None
    trials: int
    censored: int
    horizon: int
    lower_bound: bool = False
    excluded: int = 0
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def interval(self) -> tuple[float, float]:
        return self.estimate - self.half_width, self.estimate + self.half_width


def _mean_hw(values: np.ndarray) -> tuple[float | None, float | None]:
    if values.size == 0:
        return None, None
    mean = float(values.mean())
    sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return mean, Z95 * sd / math.sqrt(values.size)


def _warn_small(trials: int) -> None:
    if trials < MIN_TRIALS_NO_WARN:
        warnings.warn(
            f"{trials} trials: normal-approximation intervals are unreliable for skewed delays",
            stacklevel=3,
        )


@dataclass(frozen=True)
class EvalPlan:
    """Detector, data-generating model and Monte Carlo settings.

    The generating model may differ from the detector's design law. ``horizon``
    of ``None`` selects the default censoring cap of each estimator.
    """

    spec: DetectorSpec
    model: ChangePointModel
    trials: int = 10_000
    horizon: int | None = None
    seed: int = 0
    nu: int = 1
    nu_grid: tuple[int, ...] = (1,)
    n_jobs: int | None = None

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon must be >= 1")


def nominal_mfa(spec: DetectorSpec) -> float:
    """Rough false-alarm scale implied by a threshold, used only for caps.

    CUSUM with threshold ``A`` has ``E_inf[tau] >= exp(A)``; for Shiryaev odds
    ``A`` the mean time to stop under no change is roughly ``A / rho``.
    """
    a = max(spec.threshold.values)
    if spec.is_shiryaev:
        return max(a, 1.0) / spec.rho
    return math.exp(min(max(a, 0.0), 30.0))


def default_mfa_horizon(target: float) -> int:
    return int(min(max(50 * target, 1000), 10**8))


def default_delay_horizon(spec: DetectorSpec, model: ChangePointModel, nu: int) -> int:
    g = model.law.density_at(nu, nu)
    kl = kl_divergence(g, model.pre)
    return int(nu + max(math.ceil(200 / kl), default_mfa_horizon(nominal_mfa(spec))))


def estimate_mfa(plan: EvalPlan) -> RunMetrics:
    """Mean time to false alarm; unstopped trials count at the cap (lower bound)."""
    if not isinstance(plan.model.change, NoChange):
        raise ValueError("MFA needs a model without change")
    _warn_small(plan.trials)
    horizon = plan.horizon or default_mfa_horizon(nominal_mfa(plan.spec))
    out = simulate(plan.spec, plan.model, plan.trials, horizon, plan.seed, n_jobs=plan.n_jobs)
    est, hw = _mean_hw(out.run_length().astype(float))
    cens = int(out.censored.sum())
    return RunMetrics("MFA", est, hw, plan.trials, cens, horizon, lower_bound=cens > 0)


def _delay_outcomes(plan: EvalPlan, nu: int):
    model = replace(plan.model, change=FixedChange(nu))
    horizon = plan.horizon or default_delay_horizon(plan.spec, model, nu)
    out = simulate(plan.spec, model, plan.trials, horizon, plan.seed, n_jobs=plan.n_jobs)
    rl = out.run_length()
    false_alarm = out.stopped & (out.tau < nu)
    return rl, false_alarm, out.censored, horizon


def estimate_edd(plan: EvalPlan, nu: int | None = None) -> RunMetrics:
    """Mean of ``(tau - nu)^+`` over trials that did not alarm before ``nu``."""
    nu = plan.nu if nu is None else nu
    _warn_small(plan.trials)
    rl, fa, cens, horizon = _delay_outcomes(plan, nu)
    est, hw = _mean_hw((rl[~fa] - nu).astype(float))
    n_cens = int(cens.sum())
    return RunMetrics(
        "EDD", est, hw, plan.trials, n_cens, horizon,
        lower_bound=n_cens > 0, excluded=int(fa.sum()), detail={"nu": nu},
    )


def estimate_wadd_surrogate(plan: EvalPlan, nu_grid: Sequence[int] | None = None) -> RunMetrics:
    """Largest conditional mean of ``(tau - nu + 1)^+`` given ``tau >= nu`` over a grid of ``nu``.

    The essential supremum over pre-change histories is not estimable; this
    maximises over the supplied change points only.
    """
    grid = tuple(plan.nu_grid if nu_grid is None else nu_grid)
    if not grid:
        raise ValueError("nu grid is empty")
    _warn_small(plan.trials)
    per_nu = {}
    best = None
    for nu in grid:
        rl, fa, cens, horizon = _delay_outcomes(plan, nu)
        est, hw = _mean_hw((rl[~fa] - nu + 1).astype(float))
        per_nu[nu] = {"estimate": est, "half_width": hw, "excluded": int(fa.sum()), "censored": int(cens.sum()), "horizon": horizon}
        if est is not None and (best is None or est > per_nu[best]["estimate"]):
            best = nu
    if best is None:
        return RunMetrics("WADD-surrogate", None, None, plan.trials, 0, 0, detail={"per_nu": per_nu})
    b = per_nu[best]
    return RunMetrics(
        "WADD-surrogate", b["estimate"], b["half_width"], plan.trials, b["censored"], b["horizon"],
        lower_bound=b["censored"] > 0, excluded=b["excluded"], detail={"argmax_nu": best, "per_nu": per_nu},
    )


def default_bayes_horizon(spec: DetectorSpec, model: ChangePointModel) -> int:
    rho = model.change.rho
    return int(math.ceil(20 / rho)) + default_delay_horizon(spec, model, 1)


def estimate_bayes(plan: EvalPlan) -> tuple[RunMetrics, RunMetrics]:
    """Probability of false alarm ``P(tau < nu)`` and delay ``E[(tau - nu)^+]`` under a geometric prior."""
    if not isinstance(plan.model.change, GeometricChange):
        raise ValueError("Bayesian metrics need a geometric change-point prior")
    _warn_small(plan.trials)
    horizon = plan.horizon or default_bayes_horizon(plan.spec, plan.model)
    out = simulate(plan.spec, plan.model, plan.trials, horizon, plan.seed, n_jobs=plan.n_jobs)
    rl = out.run_length()
    fa = out.stopped & (out.tau < out.nu)
    p = float(fa.mean())
    pfa_hw = Z95 * math.sqrt(p * (1 - p) / plan.trials)
    delays = np.maximum(rl - out.nu, 0.0)
    d_est, d_hw = _mean_hw(delays)
    cens = int(out.censored.sum())
    pfa = RunMetrics("PFA", p, pfa_hw, plan.trials, cens, horizon, detail={"false_alarms": int(fa.sum())})
    delay = RunMetrics("BayesDelay", d_est, d_hw, plan.trials, cens, horizon, lower_bound=cens > 0)
    return pfa, delay


def estimate_pfa(spec: DetectorSpec, model: ChangePointModel, trials: int, seed: int, n_jobs=None) -> RunMetrics:
    """PFA alone: each trial only needs to run up to ``nu - 1``."""
    out = simulate(spec, model, trials, 10**9, seed, stop_at_change=True, n_jobs=n_jobs)
    fa = out.stopped
    p = float(fa.mean())
    return RunMetrics("PFA", p, Z95 * math.sqrt(p * (1 - p) / trials), trials, 0, 0,
                      detail={"false_alarms": int(fa.sum())})


# ---------------------------------------------------------------------------
# Calibration and operating curves


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Calibration:
    """``threshold`` is the constant threshold found, or for a periodic shape
    the offset (CUSUM) or scale factor (Shiryaev) applied to it; ``schedule``
    holds the resulting thresholds."""

    threshold: float
    achieved: float
    target: float
    metric: str
    iterations: int
    converged: bool
    schedule: tuple[float, ...] = ()


def shaped_threshold(spec: DetectorSpec, a: float) -> ThresholdSchedule:
    """Threshold schedule indexed by the scalar calibration parameter ``a``."""
    thr = spec.threshold
    if thr.shape == "constant":
        return ThresholdSchedule.constant(a)
    if thr.shape == "periodic":
        if spec.is_shiryaev:
            return ThresholdSchedule.periodic([v * a for v in thr.values])
        return thr.scaled(a)
    raise ValueError("only constant and periodic threshold shapes can be calibrated")


def calibrate_threshold(
    spec: DetectorSpec,
    target: tuple[str, float],
    bounds: tuple[float, float],
    trials: int = 2000,
    seed: int = 0,
    rho: float | None = None,
    rel_tol: float = 0.05,
    max_iter: int = 30,
    horizon: int | None = None,
    n_jobs: int | None = None,
) -> Calibration:
    """Bisect a threshold until the Monte Carlo estimate meets ``target``.

    Constant thresholds are searched directly. For a periodic schedule the
    shape of ``spec.threshold`` is kept and the search runs over an additive
    offset (CUSUM) or a positive scale factor (Shiryaev odds). ``target`` is ``("MFA", gamma)`` or ``("PFA", alpha)``. The same seed is
    reused at every step, so each trial's stopping time is monotone in the
    threshold and the bisection acts on a deterministic monotone function.
    PFA targets use a geometric prior with ``rho`` (defaults to ``spec.rho``).

    Raises
    ------
    CalibrationError
        If the bounds do not bracket the target.
    """
    metric, value = target[0].upper(), float(target[1])
    lo, hi = map(float, bounds)
    if not lo < hi:
        raise ValueError("calibration bounds must satisfy lo < hi")
    geometric = spec.is_shiryaev and lo > 0
    shaped_threshold(spec, lo)

    if metric == "MFA":
        model = ChangePointModel(spec.pre, spec.design, NoChange())
        cap = horizon or default_mfa_horizon(value)

        def evaluate(a):
            out = simulate(spec.with_threshold(shaped_threshold(spec, a)), model, trials, cap, seed, n_jobs=n_jobs)
            return float(out.run_length().mean())

        increasing = True
    elif metric == "PFA":
        prior = rho if rho is not None else spec.rho
        if prior is None:
            raise ValueError("PFA calibration needs a geometric prior parameter")
        model = ChangePointModel(spec.pre, spec.design, GeometricChange(prior))

        def evaluate(a):
            return estimate_pfa(spec.with_threshold(shaped_threshold(spec, a)), model, trials, seed, n_jobs=n_jobs).estimate

        increasing = False
    else:
        raise ValueError(f"unknown calibration target {metric!r}")

    def close(v):
        return abs(v - value) <= rel_tol * value

    e_lo, e_hi = evaluate(lo), evaluate(hi)
    below, above = (e_lo, e_hi) if increasing else (e_hi, e_lo)
    if not below - rel_tol * value <= value <= above + rel_tol * value:
        raise CalibrationError(
            f"{metric} target {value} not bracketed: estimates {e_lo:.6g} at {lo}, {e_hi:.6g} at {hi}"
        )
    def result(a, e, iterations, converged):
        return Calibration(a, e, value, metric, iterations, converged, shaped_threshold(spec, a).values)

    for a, e in ((lo, e_lo), (hi, e_hi)):
        if close(e):
            return result(a, e, 0, True)
    best = (lo, e_lo) if abs(e_lo - value) <= abs(e_hi - value) else (hi, e_hi)
    for it in range(1, max_iter + 1):
        mid = math.sqrt(lo * hi) if geometric else 0.5 * (lo + hi)
        e = evaluate(mid)
        if abs(e - value) < abs(best[1] - value):
            best = (mid, e)
        if close(e):
            return result(mid, e, it, True)
        if (e < value) == increasing:
            lo = mid
        else:
            hi = mid
    return result(best[0], best[1], max_iter, False)


CURVE_COLUMNS = (
    "detector", "threshold", "false_alarm_metric", "false_alarm", "false_alarm_hw",
    "delay_metric", "delay", "delay_hw", "censored", "excluded",
)


def operating_curve(
    specs: dict[str, DetectorSpec],
    model: ChangePointModel,
    thresholds,
    trials: int = 10_000,
    seed: int = 0,
    nu: int = 1,
    n_jobs: int | None = None,
) -> list[dict]:
    """False-alarm vs delay rows for each detector and threshold.

    With a geometric prior in ``model`` the rows hold PFA and Bayesian delay;
    otherwise MFA (from a no-change run) and EDD at change point ``nu``.
    ``thresholds`` is one list shared by all detectors or a dict keyed like
    ``specs``.
    """
    names = list(specs)
    first = specs[names[0]]
    if any(s.pre != first.pre for s in specs.values()):
        raise ValueError("detectors on one curve must share the pre-change density")
    per = thresholds if isinstance(thresholds, dict) else {k: thresholds for k in names}
    bayes = isinstance(model.change, GeometricChange)
    rows = []
    for name in names:
        for a in per[name]:
            spec = specs[name].with_threshold(a)
            if bayes:
                fa, delay = estimate_bayes(EvalPlan(spec, model, trials, seed=seed, n_jobs=n_jobs))
                excluded = 0
            else:
                null = replace(model, change=NoChange())
                fa = estimate_mfa(EvalPlan(spec, null, trials, seed=seed, n_jobs=n_jobs))
                delay = estimate_edd(EvalPlan(spec, model, trials, seed=seed, n_jobs=n_jobs), nu)
                excluded = delay.excluded
            rows.append({
                "detector": name,
                "threshold": float(a),
                "false_alarm_metric": fa.metric,
                "false_alarm": fa.estimate,
                "false_alarm_hw": fa.half_width,
                "delay_metric": delay.metric,
                "delay": delay.estimate,
                "delay_hw": delay.half_width,
                "censored": delay.censored,
                "excluded": excluded,
            })
    return rows


def matched_delays(
    specs: dict[str, DetectorSpec],
    model: ChangePointModel,
    targets: Sequence[float],
    bounds: dict[str, tuple[float, float]],
    trials: int = 10_000,
    calibration_trials: int = 2000,
    seed: int = 0,
    n_jobs: int | None = None,
) -> list[dict]:
    """Calibrate every detector to each false-alarm target, then estimate delays.

    Minimax models (no geometric prior) match MFA and report EDD at ``nu = 1``;
    Bayesian models match PFA and report the Bayesian delay.
    """
    bayes = isinstance(model.change, GeometricChange)
    rows = []
    for target in targets:
        for name, spec in specs.items():
            cal = calibrate_threshold(
                spec, ("PFA" if bayes else "MFA", target), bounds[name],
                trials=calibration_trials, seed=seed + 1,
                rho=model.change.rho if bayes else None, n_jobs=n_jobs,
            )
            tuned = spec.with_threshold(shaped_threshold(spec, cal.threshold))
            if bayes:
                fa, delay = estimate_bayes(EvalPlan(tuned, model, trials, seed=seed, n_jobs=n_jobs))
            else:
                fa = estimate_mfa(EvalPlan(tuned, replace(model, change=NoChange()), trials, seed=seed, n_jobs=n_jobs))
                delay = estimate_edd(EvalPlan(tuned, replace(model, change=FixedChange(1)), trials, seed=seed, n_jobs=n_jobs))
            rows.append({"target": target, "detector": name, "calibration": cal, "false_alarm": fa, "delay": delay})
    return rows


def rows_to_csv(path, rows: list[dict], columns: Sequence[str] = CURVE_COLUMNS, header_lines: Sequence[str] = ()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})
