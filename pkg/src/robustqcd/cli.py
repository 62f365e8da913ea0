"""Command-line front end.

Usage: ``robustqcd SUBCOMMAND --config FILE [--seed N] [--trials N]
[--threshold A] [--out PATH] [--format {csv,json}]``.

Exit statuses: 0 success, 1 runtime failure, 2 configuration error,
3 LFL verification returned a negative result.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from typing import Any, Callable

import numpy as np

from . import __version__
from . import config as C
from .changepoint_model import ChangePointModel, GeometricChange, NoChange, generate_trajectory, lfl_of, verify_lfl
from .detectors import make_detector
from .distributions import make_density
from .ingest import (
    DataError,
    distance_to_signal,
    load_csv,
    pad_and_noise,
    run_experiment,
    synthetic_counts,
    synthetic_flight_distances,
)
from .montecarlo import (
    CURVE_COLUMNS,
    CalibrationError,
    EvalPlan,
    calibrate_threshold,
    estimate_bayes,
    estimate_edd,
    estimate_mfa,
    estimate_wadd_surrogate,
    operating_curve,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_VERIFY_FAILED = 0, 1, 2, 3
COMMANDS = ("simulate", "evaluate", "curve", "calibrate", "verify-lfl", "dataset")


class Output:
    """Collects a result as JSON payload or CSV rows and writes it with metadata."""

    def __init__(self, meta: dict, fmt: str):
        self.meta = C.json_safe(meta)
        self.fmt = fmt

    def render(self, result: Any, columns=None, rows=None) -> str:
        if self.fmt == "json":
            return json.dumps({"meta": self.meta, "result": C.json_safe(result)}, indent=2, sort_keys=True) + "\n"
        buf = io.StringIO()
        buf.write("# " + json.dumps(self.meta, sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else r.get(c) for c in columns])
        return buf.getvalue()


def _run(cfg: dict):
    return C.run_settings(cfg)


def _plan(cfg, spec, model, run) -> EvalPlan:
    return EvalPlan(
        spec, model, int(run["trials"]), run["horizon"], int(run["seed"]),
        int(run["nu"]), tuple(int(v) for v in run["nu_grid"]), run["jobs"],
    )


def cmd_simulate(cfg: dict, out: Output):
    sec = C.check_keys(cfg.get("simulate"), {"horizon", "detector"}, "simulate")
    run = _run(cfg)
    model = C.model(cfg)
    horizon = int(sec.get("horizon", 1000))
    if horizon < 1:
        raise C.ConfigError("simulate.horizon must be >= 1")
    rng = np.random.default_rng(int(run["seed"]))
    x, nu = generate_trajectory(model, horizon, rng)
    result = {"nu": nu, "observations": x.tolist()}
    rows = [{"n": n, "x": float(v)} for n, v in enumerate(x, start=1)]
    columns = ["n", "x"]
    if sec.get("detector", "detector" in cfg):
        spec = C.detector(cfg.get("detector"), cfg)
        det = make_detector(spec)
        stats = [det.step(v) for v in x]
        result.update(tau=det.tau, statistic=stats)
        for r, s in zip(rows, stats):
            n = r["n"]
            r.update(statistic=s, threshold=spec.threshold.at(n), stopped=int(det.tau is not None and n >= det.tau))
        columns += ["statistic", "threshold", "stopped"]
    out.meta["nu"] = C.json_safe(nu)
    return out.render(result, columns, rows), EXIT_OK


def cmd_evaluate(cfg: dict, out: Output):
    sec = C.check_keys(cfg.get("evaluate"), {"metrics"}, "evaluate")
    run = _run(cfg)
    model = C.model(cfg)
    spec = C.detector(cfg.get("detector"), cfg)
    default = ["bayes"] if isinstance(model.change, GeometricChange) else ["mfa", "edd"]
    metrics = sec.get("metrics", default)
    plan = _plan(cfg, spec, model, run)
    results = []
    for m in metrics:
        if m == "mfa":
            results.append(estimate_mfa(_plan(cfg, spec, ChangePointModel(model.pre, model.law, NoChange()), run)))
        elif m == "edd":
            results.append(estimate_edd(plan))
        elif m == "wadd":
            results.append(estimate_wadd_surrogate(plan))
        elif m == "bayes":
            results.extend(estimate_bayes(plan))
        else:
            raise C.ConfigError(f"evaluate.metrics: unknown metric {m!r}")
    dicts = [r.to_dict() for r in results]
    cols = ["metric", "estimate", "half_width", "trials", "censored", "horizon", "lower_bound", "excluded"]
    return out.render(dicts, cols, dicts), EXIT_OK


def cmd_curve(cfg: dict, out: Output):
    sec = C.check_keys(cfg.get("curve"), {"detectors", "thresholds", "nu"}, "curve")
    if not sec.get("detectors"):
        raise C.ConfigError("curve: needs a 'detectors' mapping")
    if "thresholds" not in sec:
        raise C.ConfigError("curve: missing 'thresholds'")
    run = _run(cfg)
    model = C.model(cfg)
    specs = {name: C.detector(d, cfg, f"curve.detectors.{name}") for name, d in sec["detectors"].items()}
    rows = operating_curve(specs, model, sec["thresholds"], int(run["trials"]), int(run["seed"]),
                           int(sec.get("nu", 1)), run["jobs"])
    return out.render(rows, list(CURVE_COLUMNS), rows), EXIT_OK


def cmd_calibrate(cfg: dict, out: Output):
    sec = C.check_keys(cfg.get("calibrate"), {"target", "value", "bounds", "rho", "tolerance", "horizon"}, "calibrate")
    for key in ("target", "value", "bounds"):
        if key not in sec:
            raise C.ConfigError(f"calibrate: missing {key!r}")
    run = _run(cfg)
    det = dict(C.check_keys(cfg.get("detector"), C.DETECTOR_KEYS, "detector"))
    det.setdefault("threshold", 1.0)
    spec = C.detector(det, cfg)
    cal = calibrate_threshold(
        spec, (str(sec["target"]), float(sec["value"])), tuple(sec["bounds"]), int(run["trials"]),
        int(run["seed"]), sec.get("rho"), float(sec.get("tolerance", 0.05)), horizon=sec.get("horizon"),
        n_jobs=run["jobs"],
    )
    result = {"threshold": cal.threshold, "achieved": cal.achieved, "target": cal.target,
              "metric": cal.metric, "iterations": cal.iterations, "converged": cal.converged,
              "schedule": list(cal.schedule)}
    return out.render(result, list(result), [result]), EXIT_OK


def _probe_fn(spec: dict, ucls) -> Callable[[int, int], list[float]]:
    spec = C.check_keys(spec, {"relative", "absolute"}, "verify.probes")
    if "relative" in spec:
        rel = [float(r) for r in spec["relative"]]
        pre = ucls.pre_change
        # members between the bound and beyond: bound + (r - 1) * (bound - pre)
        return lambda n, nu: [ucls.bound_at(n, nu) + (r - 1.0) * (ucls.bound_at(n, nu) - pre) for r in rel]
    if "absolute" in spec:
        vals = [float(v) for v in spec["absolute"]]
        return lambda n, nu: vals
    raise C.ConfigError("verify.probes: give 'relative' or 'absolute'")


def _indices(spec, seed: int) -> list[tuple[int, int]]:
    if isinstance(spec, list):
        return [(int(n), int(nu)) for n, nu in spec]
    spec = C.check_keys(spec, {"random", "max_n"}, "verify.indices")
    rng = np.random.default_rng(seed)
    count, max_n = int(spec.get("random", 20)), int(spec.get("max_n", 100))
    out = []
    for _ in range(count):
        nu = int(rng.integers(1, max_n + 1))
        out.append((int(rng.integers(nu, max_n + 1)), nu))
    return out


def cmd_verify(cfg: dict, out: Output):
    sec = C.check_keys(cfg.get("verify"), {"candidate", "probes", "indices"}, "verify")
    run = _run(cfg)
    ucls = C.uncertainty_class(cfg)
    candidate = C.law(sec.get("candidate", "lfl"), cfg, "verify.candidate")
    probes = _probe_fn(sec.get("probes", {"relative": [1.0, 1.25, 1.5, 2.0, 3.0]}), ucls)
    indices = _indices(sec.get("indices", {"random": 20}), int(run["seed"]))
    try:
        ok = verify_lfl(ucls, candidate, probes, indices)
    except ValueError as exc:
        raise C.ConfigError(f"verify: {exc}") from exc
    result = {"passed": ok, "indices": [list(i) for i in indices],
              "candidate": C.law_to_config(candidate), "lfl": C.law_to_config(lfl_of(ucls))}
    row = {"passed": ok, "n_indices": len(indices)}
    return out.render(result, list(row), [row]), EXIT_OK if ok else EXIT_VERIFY_FAILED


def cmd_dataset(cfg: dict, out: Output):
    keys = {"source", "path", "layout", "transform", "scale", "n_series", "length", "pad",
            "noise", "period", "unit", "trajectories"}
    sec = C.check_keys(cfg.get("dataset"), keys, "dataset")
    run = _run(cfg)
    spec = C.detector(cfg.get("detector"), cfg)
    rng = np.random.default_rng(int(run["seed"]))
    source = sec.get("source", "synthetic_flight")
    n_series, length = int(sec.get("n_series", 35)), int(sec.get("length", 100))
    if source == "csv":
        if "path" not in sec:
            raise C.ConfigError("dataset: csv source needs 'path'")
        batch = load_csv(sec["path"], sec.get("layout", "wide"), float(sec.get("period", 1.0)),
                         sec.get("unit", "seconds"))
    elif source == "synthetic_flight":
        batch = synthetic_flight_distances(n_series, length, rng)
    elif source == "synthetic_counts":
        batch = synthetic_counts(n_series, length, rng)
    else:
        raise C.ConfigError(f"dataset.source: unknown source {source!r}")
    default_transform = "distance_to_signal" if source == "synthetic_flight" else "none"
    transform = sec.get("transform", default_transform)
    if transform == "distance_to_signal":
        batch = distance_to_signal(batch, float(sec.get("scale", 10.0)))
    elif transform != "none":
        raise C.ConfigError(f"dataset.transform: unknown transform {transform!r}")
    noise_cfg = C.check_keys(sec.get("noise", {}), {"family", "param", "variance"}, "dataset.noise")
    if noise_cfg.get("family", spec.family) == "none":
        noise = None
    else:
        fam = noise_cfg.get("family", spec.family)
        default_param = 0.0 if fam == "gaussian" else 1.0
        noise = make_density(fam, float(noise_cfg.get("param", default_param)), float(noise_cfg.get("variance", 1.0)))
    batch, boundary = pad_and_noise(batch, int(sec.get("pad", 100)), noise, rng)
    report = run_experiment(batch, boundary, spec, bool(sec.get("trajectories", False)))
    s = report.summary()
    md = "n/a" if s["mean_delay"] is None else f"{s['mean_delay']:.2f}"
    print(f"series={s['n_series']} detections={s['detections']} false_alarms={s['false_alarms']} "
          f"mean_delay={md}", file=sys.stderr)
    rows = [
        {"series_id": r.series_id, "tau": r.tau, "false_alarm": int(r.false_alarm), "delay": r.delay}
        for r in report.records
    ]
    return out.render(report.to_dict(), ["series_id", "tau", "false_alarm", "delay"], rows), EXIT_OK


HANDLERS = {
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "curve": cmd_curve,
    "calibrate": cmd_calibrate,
    "verify-lfl": cmd_verify,
    "dataset": cmd_dataset,
}
THRESHOLD_COMMANDS = {"simulate", "evaluate", "dataset"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustqcd", description="Robust quickest change detection toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="YAML experiment file")
        s.add_argument("--seed", type=int)
        s.add_argument("--trials", type=int)
        s.add_argument("--threshold", type=float)
        s.add_argument("--out", help="output file (default: stdout)")
        s.add_argument("--format", choices=("csv", "json"), default="json")
    return p


def resolve(args) -> dict:
    cfg = C.load(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise C.ConfigError("--seed must be non-negative")
        cfg = C.apply_override(cfg, ("run", "seed"), args.seed)
    if args.trials is not None:
        if args.trials < 1:
            raise C.ConfigError("--trials must be >= 1")
        cfg = C.apply_override(cfg, ("run", "trials"), args.trials)
    if args.threshold is not None:
        if args.command not in THRESHOLD_COMMANDS:
            raise C.ConfigError(f"--threshold does not apply to {args.command}")
        det = cfg.get("detector") or {}
        if "posterior" in det:
            raise C.ConfigError("--threshold conflicts with detector.posterior in the config file")
        cfg = C.apply_override(cfg, ("detector", "threshold"), args.threshold)
    cfg = dict(cfg)
    cfg["run"] = C.run_settings(cfg)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        meta = {"tool": "robustqcd", "version": __version__, "command": args.command,
                "seed": cfg["run"]["seed"], "config": cfg}
        text, status = HANDLERS[args.command](cfg, Output(meta, args.format))
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CalibrationError, DataError, OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return status


if __name__ == "__main__":
    sys.exit(main())
