import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustqcd.changepoint_model import IID, IPID, MLRSequence, Tabulated
from robustqcd.detectors import (
    CusumDetector,
    DetectorSpec,
    GeneralizedCusumDetector,
    GeneralizedShiryaevDetector,
    ShiryaevDetector,
    ThresholdSchedule,
    make_detector,
    odds_to_posterior,
    posterior_to_odds,
    run_detector,
    write_trajectory_csv,
)
from robustqcd.distributions import Gaussian, Poisson

from oracles import cusum_direct, shiryaev_direct

F = Gaussian(0.0)
G = IID(Gaussian(0.5))
X_LLR_0375 = 1.0  # llr of N(0.5) vs N(0) at x = 1


def cusum(threshold=math.log(1000), design=G, kind="cusum", **kw):
    return DetectorSpec(kind, F, design, threshold, **kw)


class TestThresholdSchedule:
    def test_constant(self):
        assert ThresholdSchedule.constant(2.0).at(np.array([1, 5])) == pytest.approx([2.0, 2.0])

    def test_periodic(self):
        s = ThresholdSchedule.periodic([1.0, 2.0, 3.0])
        assert [s.at(n) for n in (1, 2, 3, 4)] == [1.0, 2.0, 3.0, 1.0]

    def test_explicit_repeats_last(self):
        s = ThresholdSchedule.explicit([1.0, 2.0])
        assert s.at(10) == 2.0

    @pytest.mark.parametrize("shape, values", [("constant", (1.0, 2.0)), ("wavy", (1.0,)), ("explicit", ())])
    def test_invalid(self, shape, values):
        with pytest.raises(ValueError):
            ThresholdSchedule(shape, values)


class TestSpec:
    def test_classical_needs_iid(self):
        with pytest.raises(ValueError):
            cusum(design=IPID((Gaussian(0.5), Gaussian(1.0))))

    def test_shiryaev_needs_rho(self):
        with pytest.raises(ValueError):
            DetectorSpec("shiryaev", F, G, 9.0)

    def test_periodic_threshold_period_mismatch(self):
        with pytest.raises(ValueError):
            cusum(design=IPID((Gaussian(0.5), Gaussian(1.0))), kind="gen_cusum",
                  threshold=ThresholdSchedule.periodic([1.0, 2.0, 3.0]))

    def test_zero_divergence_design(self):
        with pytest.raises(ValueError):
            cusum(design=IID(Gaussian(0.0)))

    def test_recursive_flags(self):
        assert cusum(kind="gen_cusum", design=IPID((Gaussian(0.5), Gaussian(1.0)))).recursive
        assert not cusum(kind="gen_cusum", design=MLRSequence.ramp(Gaussian(0.5), 0.1)).recursive


class TestCusum:
    def test_first_step(self):
        det = CusumDetector(cusum())
        assert det.step(X_LLR_0375) == pytest.approx(0.375)

    def test_clamp(self):
        det = CusumDetector(cusum())
        det.w = 1.0
        det.n = 1
        det.step(-3.75)  # llr = 0.5 * -3.75 - 0.125 = -2
        assert det.w == 0.0

    def test_deterministic_accumulation(self):
        tau, traj = run_detector(cusum(6.9078), [X_LLR_0375] * 40)
        assert tau == math.ceil(6.9078 / 0.375) == 19
        assert traj[18] == pytest.approx(19 * 0.375)

    def test_zeros_never_stop(self):
        tau, traj = run_detector(cusum(6.9078), np.zeros(100))
        assert tau is None
        assert np.all(traj == 0)

    def test_non_positive_threshold_stops_at_one(self):
        assert run_detector(cusum(0.0), [-5.0])[0] == 1

    def test_tau_frozen_after_stop(self):
        det = make_detector(cusum(1.0))
        for x in [X_LLR_0375] * 3:
            det.step(x)
        assert det.tau == 3
        for x in [-10.0] * 5 + [10.0] * 3:
            det.step(x)
        assert det.tau == 3 and det.n == 11

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            make_detector(cusum()).step(math.nan)

    def test_poisson_rejects_fractional(self):
        spec = DetectorSpec("cusum", Poisson(1.0), IID(Poisson(2.0)), 5.0)
        with pytest.raises(ValueError):
            make_detector(spec).step(1.5)


class TestShiryaev:
    def test_rho_half_unit_ratio(self):
        spec = DetectorSpec("shiryaev", Gaussian(0.0), IID(Gaussian(0.5)), 100.0, rho=0.5)
        det = ShiryaevDetector(spec)
        # llr zero at x = 0.25
        assert det.step(0.25) == pytest.approx(1.0)

    def test_first_step_formula(self):
        spec = DetectorSpec("shiryaev", F, G, 100.0, rho=0.01)
        det = ShiryaevDetector(spec)
        assert det.step(1.0) == pytest.approx(0.01 / 0.99 * math.exp(0.375), rel=1e-12)

    def test_posterior_mapping(self):
        assert posterior_to_odds(0.9) == pytest.approx(9.0)
        assert odds_to_posterior(9.0) == pytest.approx(0.9)

    def test_posterior_out_of_range(self):
        with pytest.raises(ValueError):
            posterior_to_odds(1.0)

    def test_large_statistic_does_not_overflow(self):
        spec = DetectorSpec("shiryaev", F, G, 1e300, rho=0.01)
        tau, traj = run_detector(spec, [20.0] * 400)
        assert np.all(np.isfinite(traj[:10]))
        assert tau is not None


def _random_sequence(rng, family, length):
    if family == "gaussian":
        return list(rng.normal(0.3, 1.0, length))
    return [float(k) for k in rng.poisson(0.9, length)]


class TestRecursionOracles:
    @pytest.mark.parametrize("family, f, g", [("gaussian", 0.0, 0.5), ("poisson", 0.5, 0.8)])
    def test_cusum(self, rng, family, f, g):
        pre = Gaussian(f) if family == "gaussian" else Poisson(f)
        design = IID(pre.with_param(g))
        for _ in range(20):
            x = _random_sequence(rng, family, int(rng.integers(1, 30)))
            _, traj = run_detector(DetectorSpec("cusum", pre, design, 1e9), x)
            assert np.allclose(traj, cusum_direct(x, family, f, lambda i, k: g), atol=1e-9, rtol=0)

    @pytest.mark.parametrize("family, f, g", [("gaussian", 0.0, 0.5), ("poisson", 0.5, 0.8)])
    def test_shiryaev(self, rng, family, f, g):
        pre = Gaussian(f) if family == "gaussian" else Poisson(f)
        design = IID(pre.with_param(g))
        for _ in range(20):
            x = _random_sequence(rng, family, int(rng.integers(1, 30)))
            _, traj = run_detector(DetectorSpec("shiryaev", pre, design, 1e300, rho=0.05), x)
            assert np.allclose(traj, shiryaev_direct(x, family, f, lambda i, k: g, 0.05), rtol=1e-9, atol=0)

    def test_generalized_iid_equals_classical(self, rng):
        x = rng.normal(0.4, 1, 60)
        for kind, classical, rho in (("gen_cusum", "cusum", None), ("gen_shiryaev", "shiryaev", 0.02)):
            a = run_detector(DetectorSpec(kind, F, G, 1e9, rho=rho), x)[1]
            b = run_detector(DetectorSpec(classical, F, G, 1e9, rho=rho), x)[1]
            assert np.allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_gen_cusum_mlr_bruteforce(self, rng):
        law = MLRSequence.ramp(Gaussian(0.3), 0.05)
        x = list(rng.normal(0.5, 1, 50))
        det = GeneralizedCusumDetector(DetectorSpec("gen_cusum", F, law, 1e9))
        traj = [det.step(v) for v in x]
        expected = cusum_direct(x, "gaussian", 0.0, lambda i, k: 0.3 + 0.05 * (i - k))
        assert np.allclose(traj, expected, atol=1e-9, rtol=0)

    def test_gen_shiryaev_tabulated(self, rng):
        table = {(n, nu): Gaussian(0.2 + 0.1 * ((3 * n + nu) % 7)) for n in range(1, 31) for nu in range(1, n + 1)}
        law = Tabulated(table)
        x = list(rng.normal(0.3, 1, 30))
        det = GeneralizedShiryaevDetector(DetectorSpec("gen_shiryaev", F, law, 1e300, rho=0.05))
        traj = [det.step(v) for v in x]
        expected = shiryaev_direct(x, "gaussian", 0.0, lambda i, k: table[(i, k)].mean, 0.05)
        assert np.allclose(traj, expected, rtol=1e-9, atol=0)

    def test_ipid_fast_path_matches_accumulators(self, rng):
        law = IPID((Gaussian(0.5), Gaussian(1.0), Gaussian(0.7)))
        x = rng.normal(0.6, 1, 80)
        fast = make_detector(DetectorSpec("gen_cusum", F, law, 1e9))
        slow = GeneralizedCusumDetector(DetectorSpec("gen_cusum", F, law, 1e9))
        assert isinstance(fast, CusumDetector)
        assert np.allclose([fast.step(v) for v in x], [slow.step(v) for v in x], atol=1e-10)


class TestWindow:
    def test_window_sufficient_for_ramp(self, rng):
        law = MLRSequence.ramp(Gaussian(0.3), 0.05)
        x = np.concatenate([rng.normal(0, 1, 150), rng.normal(1.0, 1, 50)])
        full = run_detector(DetectorSpec("gen_cusum", F, law, 1e9), x)[1]
        windowed = run_detector(DetectorSpec("gen_cusum", F, law, 1e9, window=120), x)[1]
        assert np.allclose(full, windowed, atol=1e-9)

    def test_window_keeps_accumulators_bounded(self, rng):
        law = MLRSequence.ramp(Gaussian(0.3), 0.05)
        det = GeneralizedCusumDetector(DetectorSpec("gen_cusum", F, law, 1e9, window=10))
        for v in rng.normal(0, 1, 200):
            det.step(v)
        assert det.ks.size <= 11

    def test_unlimited_window_guard(self, monkeypatch):
        import robustqcd.detectors as D

        monkeypatch.setattr(D, "UNLIMITED_WINDOW_MAX", 5)
        det = GeneralizedCusumDetector(DetectorSpec("gen_cusum", F, MLRSequence.ramp(Gaussian(0.3), 0.05), 1e9))
        with pytest.raises(RuntimeError):
            for _ in range(10):
                det.step(0.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-6, 6, allow_nan=False), min_size=1, max_size=40), st.floats(0.1, 8))
def test_cusum_statistic_nonnegative_and_tau_is_first_crossing(xs, a):
    tau, traj = run_detector(cusum(a), xs)
    assert np.all(traj >= 0)
    crossings = np.flatnonzero(traj >= a)
    assert tau == (int(crossings[0]) + 1 if crossings.size else None)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-4, 4, allow_nan=False), min_size=2, max_size=30),
    st.data(),
    st.sampled_from(["cusum", "shiryaev"]),
)
def test_raising_an_observation_never_lowers_later_statistics(xs, data, kind):
    i = data.draw(st.integers(0, len(xs) - 1))
    bump = data.draw(st.floats(0.01, 3.0))
    spec = DetectorSpec(kind, F, G, 1e300, rho=0.05 if kind == "shiryaev" else None)
    lifted = list(xs)
    lifted[i] += bump
    a = run_detector(spec, xs)[1]
    b = run_detector(spec, lifted)[1]
    assert np.all(b[i:] >= a[i:] * (1 - 1e-12) - 1e-12)


def test_trajectory_csv(tmp_path):
    tau, traj = run_detector(cusum(1.0), [X_LLR_0375] * 5)
    path = tmp_path / "t.csv"
    write_trajectory_csv(path, traj, ThresholdSchedule.constant(1.0), tau)
    lines = path.read_text().splitlines()
    assert lines[0] == "n,statistic,threshold,stopped"
    assert [l.split(",")[-1] for l in lines[1:]] == ["0", "0", "1", "1", "1"]
