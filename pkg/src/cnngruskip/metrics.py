"""Forecast metrics, the Historical-Average baseline, reports and ablations."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import STEP_SECONDS, DataError, Datasets, NormStats, TrafficSeries, WindowBatch, denormalize

WEEK_SLOTS = 2016
_MONDAY_OFFSET = 4 * 86400          # 1970-01-05 was the first Monday


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ValueError("metrics need at least one prediction")
    return y, y_hat


def rmse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def mase_like(y, y_hat) -> float:
    """Root of the mean squared error over a 2-D ``[series, n]`` prediction field.

    Named for the scaled-error metric it is reported as; numerically it
    equals :func:`rmse` of the flattened field.
    """
    y, y_hat = _pair(y, y_hat)
    if y.ndim != 2:
        raise ValueError(f"mase_like expects a 2-D field, got shape {y.shape}")
    omega, n = y.shape
    return float(np.sqrt(np.sum(np.abs(y - y_hat) ** 2) / (omega * n)))


# -- historical average ------------------------------------------------------------------
def week_slot(timestamps) -> np.ndarray:
    """Index of the 5-minute slot within the Monday-based week."""
    ts = np.asarray(timestamps, dtype=np.int64)
    return ((ts - _MONDAY_OFFSET) // STEP_SECONDS) % WEEK_SLOTS


@dataclass
class HaModel:
    means: dict                      # sensor_id -> [WEEK_SLOTS] slot means (nan if unseen)
    period: int = WEEK_SLOTS


def ha_fit(train: Sequence[TrafficSeries]) -> HaModel:
    """Per-sensor, per-week-slot mean of the training flow."""
    means = {}
    for s in train:
        if len(s) < WEEK_SLOTS:
            raise DataError(f"sensor {s.sensor_id}: historical average needs at least one full "
                             f"week ({WEEK_SLOTS} points) of training data, got {len(s)}")
        slots = week_slot(s.timestamps)
        sums = np.bincount(slots, weights=s.flow, minlength=WEEK_SLOTS)
        counts = np.bincount(slots, minlength=WEEK_SLOTS)
        with np.errstate(invalid="ignore", divide="ignore"):
            means[int(s.sensor_id)] = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return HaModel(means)


def ha_predict(model: HaModel, timestamps, sensor_ids=None) -> np.ndarray:
    ts = np.asarray(timestamps, dtype=np.int64)
    if sensor_ids is None:
        if len(model.means) != 1:
            raise ValueError("sensor_ids are required when the model covers several sensors")
        sensor_ids = np.full(ts.shape[0] if ts.ndim else 1, next(iter(model.means)))
    sid = np.asarray(sensor_ids, dtype=np.int64)
    slots = week_slot(ts)
    out = np.empty(ts.shape)
    for s in np.unique(sid):
        if int(s) not in model.means:
            raise ValueError(f"sensor {int(s)} was not in the historical-average training data")
        rows = sid == s
        out[rows] = model.means[int(s)][slots[rows]]
    return out


# -- reports --------------------------------------------------------------------------
REPORT_FIELDS = ("variant", "split", "horizon_minutes", "rmse", "mae", "mase_like", "n")


@dataclass
class MetricsRow:
    horizon_minutes: int
    rmse: float
    mae: float
    mase_like: float
    n: int


@dataclass
class MetricsReport:
    variant: str
    split: str
    rows: list = field(default_factory=list)

    def row(self, horizon: int) -> MetricsRow:
        for r in self.rows:
            if r.horizon_minutes == horizon:
                return r
        raise KeyError(horizon)

    def records(self) -> list[dict]:
        return [{"variant": self.variant, "split": self.split,
                 "horizon_minutes": r.horizon_minutes, "rmse": r.rmse, "mae": r.mae,
                 "mase_like": r.mase_like, "n": r.n} for r in self.rows]


def write_reports_csv(reports: Sequence[MetricsReport], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for rep in reports:
            for rec in rep.records():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})


def write_reports_json(reports: Sequence[MetricsReport], path) -> None:
    payload = [{"variant": r.variant, "split": r.split, "rows": r.records()} for r in reports]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


PREDICTION_FIELDS = ("timestamp", "sensor_id", "horizon", "y_true", "y_pred")


@dataclass
class Predictions:
    """Long-format dump: one row per (sample, horizon), denormalised."""

    timestamps: np.ndarray
    sensor_ids: np.ndarray
    horizons: np.ndarray
    y_true: np.ndarray
    y_pred: np.ndarray

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PREDICTION_FIELDS)
            for i in range(len(self.y_true)):
                w.writerow([int(self.timestamps[i]), int(self.sensor_ids[i]), int(self.horizons[i]),
                            repr(float(self.y_true[i])), repr(float(self.y_pred[i]))])


def read_predictions_csv(path) -> Predictions:
    cols = {k: [] for k in PREDICTION_FIELDS}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            for k in PREDICTION_FIELDS:
                cols[k].append(row[k])
    return Predictions(np.array(cols["timestamp"], dtype=np.int64),
                       np.array(cols["sensor_id"], dtype=np.int64),
                       np.array(cols["horizon"], dtype=np.int64),
                       np.array(cols["y_true"], dtype=np.float64),
                       np.array(cols["y_pred"], dtype=np.float64))


def report_from_predictions(pred: Predictions, variant: str, split: str,
                            horizons: Sequence[int] | None = None) -> MetricsReport:
    """Pooled metrics per horizon; ``mase_like`` uses a ``[sensor, time]`` field."""
    horizons = sorted(set(pred.horizons.tolist())) if horizons is None else list(horizons)
    rep = MetricsReport(variant, split)
    for h in horizons:
        sel = pred.horizons == h
        if not sel.any():
            raise ValueError(f"no predictions for horizon {h}")
        y, yh, sid = pred.y_true[sel], pred.y_pred[sel], pred.sensor_ids[sel]
        sensors = np.unique(sid)
        counts = {int(s): int((sid == s).sum()) for s in sensors}
        if len(set(counts.values())) == 1:
            field_y = np.stack([y[sid == s] for s in sensors])
            field_h = np.stack([yh[sid == s] for s in sensors])
        else:
            field_y, field_h = y[None, :], yh[None, :]
        rep.rows.append(MetricsRow(int(h), rmse(y, yh), mae(y, yh), mase_like(field_y, field_h),
                                   int(y.size)))
    return rep


def predictions_for(model, batch: WindowBatch, norm: NormStats | None = None,
                    horizons: Sequence[int] | None = None) -> Predictions:
    """Denormalised predictions of a trained ``Model`` or an ``HaModel`` on ``batch``."""
    if len(batch) == 0:
        raise ValueError("cannot evaluate on an empty split")
    all_h = list(batch.horizon_minutes)
    horizons = all_h if horizons is None else list(horizons)
    missing = [h for h in horizons if h not in all_h]
    if missing:
        raise ValueError(f"horizons {missing} are not among the batch horizons {all_h}")
    cols = [all_h.index(h) for h in horizons]
    norm = norm or batch.norm
    y_true = batch.targets if norm is None else denormalize(batch.targets, norm)
    if isinstance(model, HaModel):
        y_pred = ha_predict(model, batch.target_times,
                            np.repeat(batch.sensor_ids[:, None], len(all_h), axis=1))
    else:
        raw = model.predict(batch)
        y_pred = raw if norm is None else denormalize(raw, norm)
    n = len(batch)
    hh = np.array(horizons)
    return Predictions(timestamps=batch.target_times[:, cols].reshape(-1),
                       sensor_ids=np.repeat(batch.sensor_ids, len(cols)),
                       horizons=np.tile(hh, n),
                       y_true=y_true[:, cols].reshape(-1),
                       y_pred=y_pred[:, cols].reshape(-1))


def evaluate(model, batch: WindowBatch, horizons: Sequence[int] | None = None,
             norm: NormStats | None = None, variant: str | None = None,
             split: str = "test") -> tuple[MetricsReport, Predictions]:
    """Per-horizon RMSE/MAE/mase_like in denormalised flow units."""
    pred = predictions_for(model, batch, norm, horizons)
    if variant is None:
        variant = "HA" if isinstance(model, HaModel) else model.variant
    return report_from_predictions(pred, variant, split, horizons or list(batch.horizon_minutes)), pred


# -- ablation ---------------------------------------------------------------------------
@dataclass
class AblationResult:
    reports: dict                   # variant -> MetricsReport
    histories: dict
    models: dict

    def table(self, horizon: int | None = None) -> list[dict]:
        """Rows of (variant, RMSE, MAE, dRMSE, dMAE) against the full model."""
        full = self.reports["full"]
        h = horizon if horizon is not None else full.rows[0].horizon_minutes
        base = full.row(h)
        out = []
        for name, rep in self.reports.items():
            r = rep.row(h)
            out.append({"variant": name, "RMSE": r.rmse, "MAE": r.mae,
                        "dRMSE": r.rmse - base.rmse, "dMAE": r.mae - base.mae})
        return out


def ablation_run(base_config, datasets: Datasets, train_config,
                 variants: Sequence[str] = ("full", "no_feature", "no_temporal", "no_prediction"),
                 seed: int = 0, on_epoch=None) -> AblationResult:
    """Train every variant on identical data, seed and schedule; report on test."""
    from .model import SHORT_NAMES, build_variant
    from .training import train

    reports, histories, models = {}, {}, {}
    for v in variants:
        model = build_variant(base_config, v, seed)
        result = train(model, datasets.train, datasets.val, train_config, norm=datasets.norm,
                       on_epoch=(lambda e, a, b, v=v: on_epoch(v, e, a, b)) if on_epoch else None)
        best = result.best.to_model()
        short = SHORT_NAMES[best.variant]
        rep, _ = evaluate(best, datasets.test, norm=datasets.norm, variant=short, split="test")
        key = "full" if best.variant == "full" else short
        reports[key] = rep
        histories[key] = result.history
        models[key] = best
    return AblationResult(reports, histories, models)


def write_table_csv(rows: Sequence[dict], columns: Sequence[str], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
