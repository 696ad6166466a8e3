"""Scoring of reconstructions: MAE, MRE and VRE with per-cell aggregation."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import FormatError, UndefinedMetricError

METRICS = ("mae", "mre", "vre")


@dataclass(frozen=True, eq=False)
class PredictionSet:
    """Median point predictions ``(N, T, D)`` plus optional lower/upper quantile bands.

    ``valid`` marks entries that actually carry a prediction.
    """

    point: np.ndarray
    valid: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    quantiles: tuple = (0.159, 0.5, 0.841)

    def __post_init__(self):
        point = np.asarray(self.point, dtype=np.float64)
        valid = np.asarray(self.valid).astype(bool)
        if point.shape != valid.shape:
            raise FormatError(f"valid mask {valid.shape} does not match predictions {point.shape}")
        object.__setattr__(self, "point", point)
        object.__setattr__(self, "valid", valid)
        for name in ("lower", "upper"):
            arr = getattr(self, name)
            if arr is not None:
                object.__setattr__(self, name, np.asarray(arr, dtype=np.float64))

    @classmethod
    def from_quantiles(cls, q, valid, quantiles, median_index=None):
        """Build from a ``(N, T, D, Q)`` array; the extreme heads become the band."""
        q = np.asarray(q, dtype=np.float64)
        if median_index is None:
            median_index = int(np.argmin(np.abs(np.asarray(quantiles) - 0.5)))
        if q.shape[-1] == 1:
            return cls(q[..., 0], valid, quantiles=tuple(quantiles))
        return cls(q[..., median_index], valid, q[..., 0], q[..., -1], tuple(quantiles))

    def restricted(self, mask):
        """Keep only predictions where ``mask`` is set."""
        return PredictionSet(self.point, self.valid & np.asarray(mask).astype(bool),
                             self.lower, self.upper, self.quantiles)


def _masked(pred, truth, mask):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.broadcast_to(np.asarray(mask).astype(bool), truth.shape)
    return pred, truth, mask


def mae(pred, truth, mask):
    pred, truth, mask = _masked(pred, truth, mask)
    if not mask.any():
        raise UndefinedMetricError("MAE needs at least one evaluated entry")
    return float(np.abs(pred - truth)[mask].mean())


def mre(pred, truth, mask):
    """``100 * sum|pred - truth| / sum|truth|`` over evaluated entries."""
    pred, truth, mask = _masked(pred, truth, mask)
    denom = np.abs(truth[mask]).sum()
    if not mask.any() or denom == 0:
        raise UndefinedMetricError("MRE denominator is zero")
    return float(100.0 * np.abs(pred - truth)[mask].sum() / denom)


def vre(pred, truth, mask):
    """Per-series ``mean|error| / sigma`` averaged over series, as a percentage.

    Arrays are ``(N, T, D)`` (or ``(T,)``); sigma is the population standard
    deviation of the evaluated part of each true series.  Series with zero
    sigma are skipped with a warning.
    """
    pred, truth, mask = _masked(pred, truth, mask)
    if truth.ndim == 1:
        pred, truth, mask = pred[None, :, None], truth[None, :, None], mask[None, :, None]
    scores = _vre_cells(pred, truth, mask)
    defined = scores[np.isfinite(scores)]
    if defined.size == 0:
        raise UndefinedMetricError("no series with positive variance to score")
    return float(defined.mean())


def _vre_cells(pred, truth, mask):
    counts = mask.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mu = np.where(mask, truth, 0.0).sum(axis=1) / counts
        var = np.where(mask, truth - mu[:, None, :], 0.0) ** 2
        sigma = np.sqrt(var.sum(axis=1) / counts)
        err = np.where(mask, np.abs(pred - truth), 0.0).sum(axis=1) / counts
        scores = 100.0 * err / sigma
    flat = (counts > 0) & (sigma == 0)
    if flat.any():
        warnings.warn(f"{int(flat.sum())} series with zero variance excluded from VRE",
                      RuntimeWarning, stacklevel=3)
    scores[(counts == 0) | (sigma == 0)] = np.nan
    return scores


@dataclass
class MetricReport:
    """Per-(location, channel) metrics with channel, location and global summaries.

    ``cells[metric]`` is an ``(N, D)`` array with NaN where undefined;
    ``counts`` holds the number of evaluated entries per cell.
    """

    cells: dict
    counts: np.ndarray
    channel_names: tuple = ()
    location_ids: tuple = ()
    extra: dict = field(default_factory=dict)

    def by_channel(self, metric):
        return aggregate(self.cells[metric], "channel")

    def by_location(self, metric):
        return aggregate(self.cells[metric], "location")

    def global_mean(self, metric):
        """Evaluation-count weighted mean of the defined cells."""
        vals = self.cells[metric]
        ok = np.isfinite(vals) & (self.counts > 0)
        if not ok.any():
            return math.nan
        return float((vals[ok] * self.counts[ok]).sum() / self.counts[ok].sum())

    def summary(self):
        return {m: self.global_mean(m) for m in self.cells}

    def to_json(self, path=None):
        doc = {
            "global": self.summary(),
            "channel": {m: dict(zip(self.channel_names, _nan_to_none(self.by_channel(m))))
                        for m in self.cells},
            "location": {m: dict(zip(self.location_ids, _nan_to_none(self.by_location(m))))
                         for m in self.cells},
            **self.extra,
        }
        text = json.dumps(doc, indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    def to_csv(self, path, axis="channel"):
        names = self.channel_names if axis == "channel" else self.location_ids
        columns = {m: aggregate(self.cells[m], axis) for m in self.cells}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([axis, *self.cells])
            for i, name in enumerate(names):
                w.writerow([name, *(repr(float(columns[m][i])) for m in self.cells)])
            w.writerow(["global", *(repr(self.global_mean(m)) for m in self.cells)])


def _nan_to_none(values):
    return [None if not np.isfinite(v) else float(v) for v in values]


def aggregate(cells, axis):
    """Unweighted mean of defined cells over locations (``"channel"``), channels
    (``"location"``) or everything (``"global"``)."""
    cells = np.asarray(cells, dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if axis == "channel":
            return np.nanmean(cells, axis=0)
        if axis == "location":
            return np.nanmean(cells, axis=1)
        if axis == "global":
            return float(np.nanmean(cells))
    raise ValueError(f"axis must be channel, location or global, got {axis!r}")


def evaluate(pred: PredictionSet, truth, mask, channel_names=(), location_ids=()):
    """Score ``pred`` against ``truth`` on entries where ``mask`` is set and a prediction exists.

    Query entries without a prediction are reported in ``extra['missing']``.
    """
    truth = np.asarray(truth, dtype=np.float64)
    query = np.asarray(mask).astype(bool)
    ev = query & pred.valid
    N, _, D = truth.shape
    err = np.abs(pred.point - truth)
    counts = ev.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        abs_err = np.where(ev, err, 0.0).sum(axis=1)
        mae_c = abs_err / counts
        denom = np.where(ev, np.abs(truth), 0.0).sum(axis=1)
        mre_c = 100.0 * abs_err / denom
    mre_c[denom == 0] = np.nan
    mae_c[counts == 0] = np.nan
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        vre_c = _vre_cells(pred.point, truth, ev)
    report = MetricReport({"mae": mae_c, "mre": mre_c, "vre": vre_c}, counts,
                          tuple(channel_names) or tuple(f"ch{d}" for d in range(D)),
                          tuple(location_ids) or tuple(f"loc{n}" for n in range(N)))
    report.extra["missing"] = int((query & ~pred.valid).sum())
    report.extra["evaluated"] = int(ev.sum())
    pooled = None
    if ev.any() and np.abs(truth[ev]).sum() > 0:
        pooled = mre(pred.point, truth, ev)
    report.extra["mre_pooled"] = pooled
    return report


PREDICTION_HEADER = ("location_id", "timestamp", "channel", "q_low", "q_med", "q_high")


def save_predictions(pred: PredictionSet, path, location_ids, timestamps, channel_names):
    """Long-form CSV of valid predictions in location, time, channel order."""
    lower = pred.point if pred.lower is None else pred.lower
    upper = pred.point if pred.upper is None else pred.upper
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PREDICTION_HEADER)
        for n, t, d in np.argwhere(pred.valid):
            w.writerow([location_ids[n], timestamps[t], channel_names[d],
                        repr(float(lower[n, t, d])), repr(float(pred.point[n, t, d])),
                        repr(float(upper[n, t, d]))])


def load_predictions(path, location_ids, timestamps, channel_names) -> PredictionSet:
    """Read a long-form prediction CSV onto the given index; unknown keys are errors."""
    loc = {k: i for i, k in enumerate(location_ids)}
    ts = {k: i for i, k in enumerate(timestamps)}
    ch = {k: i for i, k in enumerate(channel_names)}
    shape = (len(loc), len(ts), len(ch))
    arrays = [np.zeros(shape) for _ in range(3)]
    valid = np.zeros(shape, dtype=bool)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != PREDICTION_HEADER:
            raise FormatError(f"{path}: expected header {','.join(PREDICTION_HEADER)}")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise FormatError(f"{path}:{row_no}: expected 6 fields, got {len(row)}")
            try:
                idx = (loc[row[0]], ts[row[1]], ch[row[2]])
            except KeyError as exc:
                raise FormatError(f"{path}:{row_no}: unknown key {exc.args[0]!r}") from None
            if valid[idx]:
                raise FormatError(f"{path}:{row_no}: duplicate prediction for {tuple(row[:3])}")
            try:
                for a, v in zip(arrays, row[3:]):
                    a[idx] = float(v)
            except ValueError:
                raise FormatError(f"{path}:{row_no}: non-numeric value") from None
            valid[idx] = True
    return PredictionSet(arrays[1], valid, arrays[0], arrays[2])
