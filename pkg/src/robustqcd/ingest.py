"""Dataset pipeline: CSV loading, signal transforms, padding with noise, batch detection.

The pipeline mirrors a common field setup: a clean signal is preceded by
``pad_len`` zeros, noise is added everywhere, and the change sits at index
``pad_len + 1``. A detector run over each series then yields a stopping time,
a false-alarm flag (stop before the boundary) and a delay ``tau - boundary``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .changepoint_model import IID
from .detectors import DetectorSpec, make_detector
from .distributions import Density, Gaussian, Poisson, sample


class DataError(ValueError):
    pass


@dataclass
class SeriesBatch:
    ids: list[str]
    values: list[np.ndarray]
    period: float = 1.0
    unit: str = "seconds"
    note: str = ""

    def __post_init__(self):
        if len(self.ids) != len(self.values):
            raise DataError("ids and values differ in length")
        self.values = [np.asarray(v, dtype=float) for v in self.values]
        for sid, v in zip(self.ids, self.values):
            if v.size == 0:
                raise DataError(f"series {sid!r} is empty")

    def __len__(self):
        return len(self.ids)

    def replace_values(self, values, note: str) -> "SeriesBatch":
        joined = f"{self.note}; {note}" if self.note else note
        return SeriesBatch(list(self.ids), values, self.period, self.unit, joined)


def _parse_cell(text: str, line: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"line {line}, column {column!r}: non-numeric value {text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"line {line}, column {column!r}: non-finite value {text!r}")
    return value


def load_csv(path, layout: str = "wide", period: float = 1.0, unit: str = "seconds") -> SeriesBatch:
    """Read a batch of series.

    ``wide``: header row of series ids, one column per series, all columns the
    same length. ``long``: columns ``series_id``, ``t``, ``value`` in any order;
    series keep first-appearance order and are sorted by ``t``.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [(i, r) for i, r in enumerate(rows[1:], start=2) if any(c.strip() for c in r)]
    if layout == "wide":
        cols: list[list[float]] = [[] for _ in header]
        for line, row in body:
            if len(row) != len(header) or any(not c.strip() for c in row):
                raise DataError(f"{path}: line {line}: ragged row ({len(row)} cells for {len(header)} columns)")
            for j, cell in enumerate(row):
                cols[j].append(_parse_cell(cell.strip(), line, header[j]))
        return SeriesBatch(header, [np.array(c) for c in cols], period, unit, f"loaded from {path}")
    if layout == "long":
        try:
            i_id, i_t, i_v = header.index("series_id"), header.index("t"), header.index("value")
        except ValueError:
            raise DataError(f"{path}: long layout needs columns series_id, t, value") from None
        groups: dict[str, list[tuple[float, float]]] = {}
        for line, row in body:
            if len(row) != len(header):
                raise DataError(f"{path}: line {line}: expected {len(header)} cells, got {len(row)}")
            t = _parse_cell(row[i_t].strip(), line, "t")
            v = _parse_cell(row[i_v].strip(), line, "value")
            groups.setdefault(row[i_id].strip(), []).append((t, v))
        ids = list(groups)
        values = [np.array([v for _, v in sorted(groups[k], key=lambda p: p[0])]) for k in ids]
        return SeriesBatch(ids, values, period, unit, f"loaded from {path}")
    raise DataError(f"unknown layout {layout!r}")


def write_csv(batch: SeriesBatch, path, layout: str = "wide") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if layout == "wide":
            lengths = {v.size for v in batch.values}
            if len(lengths) != 1:
                raise DataError("wide layout needs equal-length series")
            w.writerow(batch.ids)
            for row in np.column_stack(batch.values):
                w.writerow([repr(float(x)) for x in row])
        else:
            w.writerow(["series_id", "t", "value"])
            for sid, v in zip(batch.ids, batch.values):
                for t, x in enumerate(v, start=1):
                    w.writerow([sid, t, repr(float(x))])


def distance_to_signal(batch: SeriesBatch, scale: float = 10.0) -> SeriesBatch:
    """Map distances to signal strength ``scale / distance``."""
    for sid, v in zip(batch.ids, batch.values):
        if np.any(v <= 0):
            raise DataError(f"series {sid!r}: distances must be positive")
    return batch.replace_values([scale / v for v in batch.values], f"signal = {scale}/distance")


def pad_and_noise(batch: SeriesBatch, pad_len: int, noise: Density | None, rng: np.random.Generator):
    """Prepend ``pad_len`` zeros and add i.i.d. noise to every sample.

    ``noise=None`` adds nothing. Returns ``(batch, boundary)`` where
    ``boundary = pad_len + 1`` is the first signal-bearing index.
    """
    if pad_len < 0:
        raise DataError("pad_len must be >= 0")
    out = []
    for v in batch.values:
        padded = np.concatenate([np.zeros(pad_len), v])
        if noise is not None:
            padded = padded + sample(noise, rng, size=padded.size)
        out.append(padded)
    return batch.replace_values(out, f"padded {pad_len}, noise {noise}"), pad_len + 1


# ---------------------------------------------------------------------------
# Synthetic stand-ins


def synthetic_flight_distances(
    n_series: int,
    length: int,
    rng: np.random.Generator,
    peak_range: tuple[float, float] = (2.0, 5.0),
    floor: float = 0.64,
    scale: float = 10.0,
) -> SeriesBatch:
    """Approach-like distance tracks whose signal ``scale/d`` ramps up.

    Signal of series ``i`` at step ``t`` is ``max(floor, c_i * t / length)``
    with ``c_i`` uniform on ``peak_range``.
    """
    t = np.arange(1, length + 1)
    peaks = rng.uniform(*peak_range, size=n_series)
    values = [scale / np.maximum(floor, c * t / length) for c in peaks]
    ids = [f"series_{i:03d}" for i in range(n_series)]
    return SeriesBatch(ids, values, 1.0, "seconds", "synthetic flight stand-in (distances)")


def synthetic_counts(
    n_series: int,
    length: int,
    rng: np.random.Generator,
    onset: int = 70,
    peak_range: tuple[float, float] = (5.0, 40.0),
) -> SeriesBatch:
    """Daily count series: zero before ``onset``, then Poisson counts with a rising rate."""
    t = np.arange(1, length + 1)
    values = []
    for peak in rng.uniform(*peak_range, size=n_series):
        rate = np.where(t >= onset, peak * (t - onset + 1) / max(length - onset + 1, 1), 0.0)
        values.append(rng.poisson(rate).astype(float))
    ids = [f"region_{i:03d}" for i in range(n_series)]
    return SeriesBatch(ids, values, 1.0, "days", "synthetic count stand-in")


# ---------------------------------------------------------------------------
# Batch detection


@dataclass
class SeriesResult:
    series_id: str
    tau: int | None
    false_alarm: bool
    delay: int | None


@dataclass
class ExperimentReport:
    boundary: int
    records: list[SeriesResult]
    threshold: list[float]
    period: float = 1.0
    unit: str = "seconds"
    trajectories: dict[str, list[float]] = field(default_factory=dict)

    @property
    def n_series(self) -> int:
        return len(self.records)

    @property
    def n_false_alarms(self) -> int:
        return sum(r.false_alarm for r in self.records)

    @property
    def n_detected(self) -> int:
        return sum(r.tau is not None and not r.false_alarm for r in self.records)

    @property
    def false_alarm_fraction(self) -> float:
        return self.n_false_alarms / self.n_series if self.records else 0.0

    @property
    def mean_delay(self) -> float | None:
        """Mean delay over detected, non-false-alarm series (in samples)."""
        d = [r.delay for r in self.records if r.delay is not None]
        return float(np.mean(d)) if d else None

    def summary(self) -> dict:
        md = self.mean_delay
        return {
            "n_series": self.n_series,
            "boundary": self.boundary,
            "detections": self.n_detected,
            "false_alarms": self.n_false_alarms,
            "missed": self.n_series - self.n_detected - self.n_false_alarms,
            "false_alarm_fraction": self.false_alarm_fraction,
            "mean_delay": md,
            "mean_delay_time": None if md is None else md * self.period,
            "unit": self.unit,
        }

    def to_dict(self) -> dict:
        out = {"summary": self.summary(), "threshold": self.threshold,
               "records": [asdict(r) for r in self.records]}
        if self.trajectories:
            out["trajectories"] = self.trajectories
        return out

    def write_json(self, path, meta: dict | None = None) -> None:
        payload = {"meta": meta or {}, "result": self.to_dict()}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=False)
            fh.write("\n")

    def write_csv(self, path, header_lines: Sequence[str] = ()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["series_id", "tau", "false_alarm", "delay"])
            for r in self.records:
                w.writerow([r.series_id, "" if r.tau is None else r.tau, int(r.false_alarm),
                            "" if r.delay is None else r.delay])


def run_experiment(
    batch: SeriesBatch,
    boundary: int,
    spec: DetectorSpec,
    keep_trajectories: bool = False,
) -> ExperimentReport:
    """Run the detector over every series and classify each stop."""
    records = []
    trajectories = {}
    for sid, values in zip(batch.ids, batch.values):
        det = make_detector(spec)
        traj = [det.step(x) for x in values]
        tau = det.tau
        fa = tau is not None and tau < boundary
        delay = tau - boundary if tau is not None and not fa else None
        records.append(SeriesResult(sid, tau, fa, delay))
        if keep_trajectories:
            trajectories[sid] = [float(s) for s in traj]
    longest = max(v.size for v in batch.values)
    thr = [float(x) for x in np.atleast_1d(spec.threshold.at(np.arange(1, longest + 1)))]
    if spec.threshold.shape == "constant":
        thr = thr[:1]
    return ExperimentReport(boundary, records, thr, batch.period, batch.unit, trajectories)


def flight_spec(threshold: float = math.log(1000), design_mean: float = 0.64) -> DetectorSpec:
    """Robust CUSUM for noisy signals: N(0,1) before, N(design_mean,1) least favorable after."""
    return DetectorSpec("cusum", Gaussian(0.0), IID(Gaussian(design_mean)), threshold)


def counts_spec(threshold: float = math.log(1000), baseline: float = 1.0, design_rate: float = 2.0) -> DetectorSpec:
    """Robust CUSUM for counts over Poisson background noise."""
    return DetectorSpec("cusum", Poisson(baseline), IID(Poisson(design_rate)), threshold)
