"""YAML experiment configuration: parsing into model objects and back.

Every section is checked against a fixed key set; unknown keys raise
:class:`ConfigError`. The full schema is documented in the README.
"""

from __future__ import annotations

import copy
import math
from typing import Any

import yaml

from .changepoint_model import (
    IID,
    IPID,
    ChangePointModel,
    FixedChange,
    GeometricChange,
    MLRSequence,
    NoChange,
    PostChangeLaw,
    Tabulated,
    UncertaintyClass,
    lfl_of,
)
from .detectors import DetectorSpec, ThresholdSchedule, posterior_to_odds
from .distributions import Density, make_density


class ConfigError(ValueError):
    pass


TOP_KEYS = {
    "family", "pre_change", "variance", "model", "detector", "uncertainty", "run",
    "simulate", "evaluate", "curve", "calibrate", "verify", "dataset",
}
LAW_KEYS = {"structure", "params", "step", "table", "default"}
DETECTOR_KEYS = {"kind", "design", "threshold", "posterior", "rho", "window"}
RUN_KEYS = {"seed", "trials", "horizon", "nu", "nu_grid", "jobs"}
RUN_DEFAULTS = {"seed": 0, "trials": 10_000, "horizon": None, "nu": 1, "nu_grid": [1], "jobs": None}


def check_keys(section: Any, allowed: set, where: str) -> dict:
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(section).__name__}")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}; allowed {sorted(allowed)}")
    return section


def load(path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    data = {} if data is None else data
    check_keys(data, TOP_KEYS, "config")
    return data


def dump(cfg: dict, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=False)


def _family(cfg: dict) -> tuple[str, float, float]:
    family = cfg.get("family", "gaussian")
    if family not in ("gaussian", "poisson"):
        raise ConfigError(f"family must be gaussian or poisson, got {family!r}")
    default_pre = 0.0 if family == "gaussian" else None
    pre = cfg.get("pre_change", default_pre)
    if pre is None:
        raise ConfigError("poisson configs need pre_change (the pre-change rate)")
    return family, float(pre), float(cfg.get("variance", 1.0))


def pre_change(cfg: dict) -> Density:
    family, pre, var = _family(cfg)
    try:
        return make_density(family, pre, var)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def uncertainty_class(cfg: dict) -> UncertaintyClass:
    sec = check_keys(cfg.get("uncertainty"), {"schedule", "bound", "step", "default"}, "uncertainty")
    if "bound" not in sec:
        raise ConfigError("uncertainty: missing 'bound'")
    family, pre, var = _family(cfg)
    schedule = sec.get("schedule", "constant")
    bound = sec["bound"]
    if schedule == "tabulated":
        bound = {(int(n), int(nu)): float(b) for n, nu, b in bound}
    try:
        return UncertaintyClass(
            family, bound, schedule, pre, var, float(sec.get("step", 0.0)), sec.get("default")
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"uncertainty: {exc}") from exc


def law(section: Any, cfg: dict, where: str) -> PostChangeLaw:
    """Build a post-change law; the string ``lfl`` derives it from the uncertainty section."""
    if section == "lfl":
        return lfl_of(uncertainty_class(cfg))
    sec = check_keys(section, LAW_KEYS, where)
    family, _, var = _family(cfg)
    structure = sec.get("structure", "iid")

    def dens(p):
        return make_density(family, float(p), var)

    try:
        params = sec.get("params", [])
        params = [params] if isinstance(params, (int, float)) else list(params)
        if structure == "iid":
            if len(params) != 1:
                raise ConfigError(f"{where}: iid law takes exactly one parameter")
            return IID(dens(params[0]))
        if structure == "ipid":
            return IPID(tuple(dens(p) for p in params))
        if structure == "mlr":
            return MLRSequence(tuple(dens(p) for p in params), float(sec.get("step", 0.0)))
        if structure == "tabulated":
            table = {(int(n), int(nu)): dens(p) for n, nu, p in sec.get("table", [])}
            default = sec.get("default")
            return Tabulated(table, dens(default) if default is not None else None)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}: unknown structure {structure!r}")


def change_point(section: Any):
    sec = check_keys(section, {"kind", "rho", "nu"}, "model.change_point")
    kind = sec.get("kind", "none")
    try:
        if kind == "none":
            return NoChange()
        if kind == "fixed":
            return FixedChange(int(sec["nu"]))
        if kind == "geometric":
            return GeometricChange(float(sec["rho"]))
    except KeyError as exc:
        raise ConfigError(f"model.change_point: missing {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"model.change_point: {exc}") from exc
    raise ConfigError(f"model.change_point: unknown kind {kind!r}")


def model(cfg: dict) -> ChangePointModel:
    sec = check_keys(cfg.get("model"), {"post_change", "change_point"}, "model")
    if "post_change" not in sec:
        raise ConfigError("model: missing 'post_change'")
    try:
        return ChangePointModel(pre_change(cfg), law(sec["post_change"], cfg, "model.post_change"),
                                change_point(sec.get("change_point")))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc


def threshold(value: Any, where: str) -> ThresholdSchedule:
    if isinstance(value, (int, float)):
        return ThresholdSchedule.constant(float(value))
    sec = check_keys(value, {"shape", "values"}, where)
    try:
        return ThresholdSchedule(sec.get("shape", "constant"), tuple(sec.get("values", ())))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def detector(section: Any, cfg: dict, where: str = "detector") -> DetectorSpec:
    sec = check_keys(section, DETECTOR_KEYS, where)
    kind = sec.get("kind", "cusum")
    if "threshold" in sec and "posterior" in sec:
        raise ConfigError(f"{where}: give either threshold or posterior, not both")
    if "posterior" in sec:
        thr = ThresholdSchedule.constant(posterior_to_odds(float(sec["posterior"])))
    elif "threshold" in sec:
        thr = threshold(sec["threshold"], f"{where}.threshold")
    else:
        raise ConfigError(f"{where}: missing threshold")
    design = law(sec.get("design", "lfl"), cfg, f"{where}.design")
    try:
        return DetectorSpec(kind, pre_change(cfg), design, thr, sec.get("rho"), sec.get("window"))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def run_settings(cfg: dict) -> dict:
    sec = check_keys(cfg.get("run"), RUN_KEYS, "run")
    out = dict(RUN_DEFAULTS)
    out.update(sec)
    if int(out["trials"]) < 1:
        raise ConfigError("run.trials must be >= 1")
    if out["horizon"] is not None and int(out["horizon"]) < 1:
        raise ConfigError("run.horizon must be >= 1")
    if int(out["seed"]) < 0:
        raise ConfigError("run.seed must be non-negative")
    return out


def apply_override(cfg: dict, path: tuple[str, ...], value: Any) -> dict:
    """Set ``cfg[path]`` to ``value``; a different value already in the file is an error."""
    cfg = copy.deepcopy(cfg)
    node = cfg
    for key in path[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {'.'.join(path)}")
    leaf = path[-1]
    if leaf in node and node[leaf] != value:
        raise ConfigError(
            f"flag value {value!r} conflicts with {'.'.join(path)} = {node[leaf]!r} in the config file"
        )
    node[leaf] = value
    return cfg


# ---------------------------------------------------------------------------
# Serialisation of model objects back to config sections


def law_to_config(law_: PostChangeLaw) -> dict | None:
    if isinstance(law_, IID):
        return {"structure": "iid", "params": [law_.density.param]}
    if isinstance(law_, IPID):
        return {"structure": "ipid", "params": [d.param for d in law_.cycle]}
    if isinstance(law_, MLRSequence):
        return {"structure": "mlr", "params": [d.param for d in law_.values], "step": law_.step}
    out = {"structure": "tabulated", "table": [[n, nu, d.param] for (n, nu), d in sorted(law_.table.items())]}
    if law_.default is not None:
        out["default"] = law_.default.param
    return out


def change_to_config(change) -> dict:
    if isinstance(change, FixedChange):
        return {"kind": "fixed", "nu": change.nu}
    if isinstance(change, GeometricChange):
        return {"kind": "geometric", "rho": change.rho}
    return {"kind": "none"}


def model_to_config(m: ChangePointModel) -> dict:
    cfg = {"family": m.family, "pre_change": m.pre.param}
    if m.family == "gaussian":
        cfg["variance"] = m.pre.variance
    cfg["model"] = {"post_change": law_to_config(m.law), "change_point": change_to_config(m.change)}
    return cfg


def detector_to_config(spec: DetectorSpec) -> dict:
    thr = spec.threshold
    out = {
        "kind": spec.kind,
        "design": law_to_config(spec.design),
        "threshold": thr.values[0] if thr.shape == "constant" else {"shape": thr.shape, "values": list(thr.values)},
    }
    if spec.rho is not None:
        out["rho"] = spec.rho
    if spec.window is not None:
        out["window"] = spec.window
    return out


def json_safe(obj: Any) -> Any:
    """Replace non-finite floats and tuples so the result is strict JSON."""
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return None
        return obj
    if isinstance(obj, dict):
        return {str(k): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if hasattr(obj, "item") and callable(obj.item):
        return json_safe(obj.item())
    return obj
