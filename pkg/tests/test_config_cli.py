import csv
import io
import json
import math
from pathlib import Path

import numpy as np
import pytest
import yaml

from robustqcd import config as C
from robustqcd.changepoint_model import IID, IPID, MLRSequence, Tabulated
from robustqcd.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_VERIFY_FAILED, main
from robustqcd.distributions import Gaussian, Poisson
from robustqcd.ingest import synthetic_flight_distances, write_csv

from oracles import siegmund_threshold

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

BASE = {
    "family": "gaussian",
    "uncertainty": {"bound": 0.5},
    "model": {"post_change": {"structure": "iid", "params": [0.5]}, "change_point": {"kind": "fixed", "nu": 1}},
}


def write_cfg(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def run_json(capsys, *argv):
    status = main(list(argv))
    out = capsys.readouterr().out
    return status, (json.loads(out) if status in (EXIT_OK, EXIT_VERIFY_FAILED) else None)


def read_csv(text):
    rows = [l for l in text.splitlines() if not l.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(rows))))


class TestConfigParsing:
    def test_unknown_top_key(self, tmp_path):
        with pytest.raises(C.ConfigError):
            C.load(write_cfg(tmp_path, {"famly": "gaussian"}))

    def test_unknown_nested_key(self):
        with pytest.raises(C.ConfigError):
            C.detector({"kind": "cusum", "threshold": 1.0, "colour": 3}, BASE)

    def test_threshold_and_posterior_exclusive(self):
        with pytest.raises(C.ConfigError):
            C.detector({"kind": "shiryaev", "rho": 0.01, "threshold": 1.0, "posterior": 0.9}, BASE)

    def test_posterior_to_odds(self):
        spec = C.detector({"kind": "shiryaev", "rho": 0.01, "posterior": 0.9}, BASE)
        assert spec.threshold.values == pytest.approx((9.0,))

    def test_poisson_needs_rate(self):
        with pytest.raises(C.ConfigError):
            C.pre_change({"family": "poisson"})

    @pytest.mark.parametrize(
        "section, expected",
        [
            ({"structure": "iid", "params": 0.7}, IID(Gaussian(0.7))),
            ({"structure": "ipid", "params": [0.5, 1.0]}, IPID((Gaussian(0.5), Gaussian(1.0)))),
            ({"structure": "mlr", "params": [0.5], "step": 0.1}, MLRSequence((Gaussian(0.5),), 0.1)),
            ({"structure": "tabulated", "table": [[1, 1, 0.5]], "default": 0.6},
             Tabulated({(1, 1): Gaussian(0.5)}, Gaussian(0.6))),
        ],
    )
    def test_law_roundtrip(self, section, expected):
        law = C.law(section, BASE, "law")
        assert law == expected
        assert C.law(C.law_to_config(law), BASE, "law") == law

    def test_lfl_from_uncertainty(self):
        cfg = {"family": "poisson", "pre_change": 0.5, "uncertainty": {"bound": 0.8}}
        assert C.law("lfl", cfg, "x") == IID(Poisson(0.8))

    def test_tabulated_uncertainty(self):
        cfg = {"family": "gaussian", "uncertainty": {"schedule": "tabulated", "bound": [[2, 1, 0.5], [3, 1, 0.7]]}}
        assert C.uncertainty_class(cfg).bound_at(3, 1) == 0.7

    def test_run_defaults(self):
        run = C.run_settings({})
        assert run["seed"] == 0 and run["trials"] == 10_000

    @pytest.mark.parametrize("run", [{"trials": 0}, {"seed": -1}, {"horizon": 0}])
    def test_run_validation(self, run):
        with pytest.raises(C.ConfigError):
            C.run_settings({"run": run})

    def test_override_conflict(self):
        with pytest.raises(C.ConfigError):
            C.apply_override({"run": {"seed": 1}}, ("run", "seed"), 2)
        assert C.apply_override({"run": {"seed": 1}}, ("run", "seed"), 1)["run"]["seed"] == 1

    def test_json_safe(self):
        assert C.json_safe({"a": math.inf, "b": (1, math.nan), "c": np.float64(2.5)}) == {
            "a": "inf", "b": [1, None], "c": 2.5
        }

    def test_model_and_detector_serialisers(self):
        m = C.model(BASE)
        assert C.model(C.model_to_config(m)) == m
        spec = C.detector({"kind": "gen_cusum", "design": "lfl", "threshold": 2.0, "window": 5}, BASE)
        assert C.detector(C.detector_to_config(spec), BASE) == spec


class TestSimulate:
    def test_geometric_rerun_identical(self, tmp_path, capsys):
        args = ["simulate", "--config", str(CONFIGS / "simulate_geometric.yaml")]
        out1, out2 = tmp_path / "a.json", tmp_path / "b.json"
        assert main(args + ["--out", str(out1)]) == EXIT_OK
        assert main(args + ["--out", str(out2)]) == EXIT_OK
        assert out1.read_bytes() == out2.read_bytes()
        meta = json.loads(out1.read_text())["meta"]
        assert meta["seed"] == 7 and meta["tool"] == "robustqcd" and "version" in meta

    def test_no_change_records_infinity(self, tmp_path, capsys):
        cfg = dict(BASE, model={"post_change": {"structure": "iid", "params": [0.5]}})
        status, payload = run_json(capsys, "simulate", "--config", write_cfg(tmp_path, cfg))
        assert status == EXIT_OK
        assert payload["meta"]["nu"] == "inf" and payload["result"]["nu"] == "inf"

    def test_fixed_one_mean(self, tmp_path, capsys):
        cfg = dict(BASE, simulate={"horizon": 10_000})
        status, payload = run_json(capsys, "simulate", "--config", write_cfg(tmp_path, cfg), "--seed", "3")
        assert status == EXIT_OK
        assert np.mean(payload["result"]["observations"]) == pytest.approx(0.5, abs=0.04)

    def test_csv_with_detector(self, tmp_path, capsys):
        cfg = dict(BASE, detector={"kind": "cusum", "threshold": 3.0}, simulate={"horizon": 50})
        assert main(["simulate", "--config", write_cfg(tmp_path, cfg), "--format", "csv"]) == EXIT_OK
        text = capsys.readouterr().out
        assert text.startswith("# {")
        rows = read_csv(text)
        assert len(rows) == 50 and set(rows[0]) == {"n", "x", "statistic", "threshold", "stopped"}


class TestEvaluateCurveCalibrate:
    def test_evaluate(self, tmp_path, capsys):
        cfg = yaml.safe_load((CONFIGS / "gaussian_eval.yaml").read_text())
        del cfg["run"]["trials"]
        status, payload = run_json(capsys, "evaluate", "--config", write_cfg(tmp_path, cfg), "--trials", "500")
        assert status == EXIT_OK
        metrics = {m["metric"]: m for m in payload["result"]}
        assert metrics["MFA"]["estimate"] > 100 and metrics["EDD"]["excluded"] == 0

    def test_trials_zero(self, capsys):
        assert main(["evaluate", "--config", str(CONFIGS / "gaussian_eval.yaml"), "--trials", "0"]) == EXIT_CONFIG

    def test_flag_conflict(self, capsys):
        assert main(["evaluate", "--config", str(CONFIGS / "gaussian_eval.yaml"), "--seed", "99"]) == EXIT_CONFIG
        assert "conflicts" in capsys.readouterr().err

    def test_curve_robust_dominates(self, capsys):
        assert main(["curve", "--config", str(CONFIGS / "gaussian_curve.yaml"), "--format", "csv"]) == EXIT_OK
        rows = read_csv(capsys.readouterr().out)
        robust = [r for r in rows if r["detector"] == "robust"]
        other = [r for r in rows if r["detector"] == "nonrobust"]
        assert len(robust) == len(other) == 3
        for a, b in zip(robust, other):
            assert float(a["false_alarm"]) >= float(b["false_alarm"])
            assert float(a["delay"]) <= float(b["delay"])

    def test_curve_threshold_flag_rejected(self, capsys):
        assert main(["curve", "--config", str(CONFIGS / "gaussian_curve.yaml"), "--threshold", "1"]) == EXIT_CONFIG

    def test_calibrate(self, capsys):
        status, payload = run_json(capsys, "calibrate", "--config", str(CONFIGS / "calibrate_mfa.yaml"))
        assert status == EXIT_OK
        res = payload["result"]
        assert res["converged"] and res["threshold"] <= math.log(100)
        assert res["threshold"] == pytest.approx(siegmund_threshold(100, -0.125, 0.5), abs=0.3)

    def test_calibrate_unachievable(self, tmp_path, capsys):
        cfg = yaml.safe_load((CONFIGS / "calibrate_mfa.yaml").read_text())
        cfg["calibrate"]["bounds"] = [0.5, 1.0]
        cfg["calibrate"]["value"] = 1e5
        cfg["run"]["trials"] = 100
        assert main(["calibrate", "--config", write_cfg(tmp_path, cfg)]) == EXIT_RUNTIME
        assert "not bracketed" in capsys.readouterr().err


class TestVerify:
    def test_example_config_passes(self, capsys):
        status, payload = run_json(capsys, "verify-lfl", "--config", str(CONFIGS / "verify_periodic.yaml"))
        assert status == EXIT_OK and payload["result"]["passed"]
        assert payload["result"]["lfl"]["structure"] == "ipid"

    def test_misspecified_candidate(self, tmp_path, capsys):
        cfg = {"family": "gaussian", "uncertainty": {"bound": 0.5},
               "verify": {"candidate": {"structure": "iid", "params": [0.6]}, "probes": {"absolute": [0.5]},
                          "indices": [[1, 1]]}}
        status, payload = run_json(capsys, "verify-lfl", "--config", write_cfg(tmp_path, cfg))
        assert status == EXIT_VERIFY_FAILED and payload["result"]["passed"] is False

    def test_probe_below_bound(self, tmp_path, capsys):
        cfg = {"family": "gaussian", "uncertainty": {"bound": 0.5}, "verify": {"probes": {"absolute": [0.2]}}}
        assert main(["verify-lfl", "--config", write_cfg(tmp_path, cfg)]) == EXIT_CONFIG


class TestDataset:
    def test_synthetic_flight(self, capsys):
        status, payload = run_json(capsys, "dataset", "--config", str(CONFIGS / "dataset_flight.yaml"))
        assert status == EXIT_OK
        summary = payload["result"]["summary"]
        assert summary["n_series"] == 200 and summary["false_alarm_fraction"] <= 0.15

    def test_summary_line(self, capsys):
        main(["dataset", "--config", str(CONFIGS / "dataset_flight.yaml")])
        err = capsys.readouterr().err
        assert err.startswith("series=200 detections=") and "mean_delay=" in err

    def test_threshold_override_zero(self, tmp_path, capsys):
        cfg = yaml.safe_load((CONFIGS / "dataset_flight.yaml").read_text())
        del cfg["detector"]["threshold"]
        cfg["dataset"]["n_series"] = 20
        status, payload = run_json(capsys, "dataset", "--config", write_cfg(tmp_path, cfg), "--threshold", "0")
        assert status == EXIT_OK
        records = payload["result"]["records"]
        assert all(r["tau"] == 1 and r["false_alarm"] for r in records)

    def test_long_and_wide_give_same_report(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        batch = synthetic_flight_distances(12, 60, rng)
        write_csv(batch, tmp_path / "w.csv", "wide")
        write_csv(batch, tmp_path / "l.csv", "long")
        results = []
        for layout in ("wide", "long"):
            cfg = {"family": "gaussian", "uncertainty": {"bound": 0.64},
                   "detector": {"kind": "cusum", "threshold": 6.9078},
                   "dataset": {"source": "csv", "path": str(tmp_path / f"{layout[0]}.csv"), "layout": layout,
                               "transform": "distance_to_signal", "pad": 50}}
            status, payload = run_json(capsys, "dataset", "--config", write_cfg(tmp_path, cfg, f"{layout}.yaml"))
            assert status == EXIT_OK
            results.append(payload["result"])
        assert results[0] == results[1]

    def test_missing_csv(self, tmp_path, capsys):
        cfg = {"family": "gaussian", "uncertainty": {"bound": 0.64}, "detector": {"threshold": 6.9},
               "dataset": {"source": "csv", "path": str(tmp_path / "nope.csv")}}
        assert main(["dataset", "--config", write_cfg(tmp_path, cfg)]) == EXIT_RUNTIME


def test_embedded_config_reproduces_output(tmp_path, capsys):
    first = tmp_path / "first.json"
    assert main(["dataset", "--config", str(CONFIGS / "dataset_flight.yaml"), "--out", str(first)]) == EXIT_OK
    embedded = json.loads(first.read_text())["meta"]["config"]
    second = tmp_path / "second.json"
    assert main(["dataset", "--config", write_cfg(tmp_path, embedded), "--out", str(second)]) == EXIT_OK
    assert first.read_bytes() == second.read_bytes()


def test_missing_config_file(capsys):
    assert main(["simulate", "--config", "/nonexistent.yaml"]) == EXIT_CONFIG


def test_parallel_env_does_not_change_output(tmp_path, capsys, monkeypatch):
    args = ["evaluate", "--config", str(CONFIGS / "gaussian_eval.yaml")]
    monkeypatch.setenv("ROBUSTQCD_JOBS", "1")
    main(args)
    serial = capsys.readouterr().out
    monkeypatch.setenv("ROBUSTQCD_JOBS", "2")
    main(args)
    assert capsys.readouterr().out == serial
