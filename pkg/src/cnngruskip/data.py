"""Traffic series ingestion, synthetic generation, normalisation and windowing.

Series live on a 5-minute grid. Samples are cut with stride 1; each sample
carries an input window, the skip-sampled history of the target variable
(one value per past period), and one target per requested horizon.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

STEP_SECONDS = 300
SLOTS_PER_DAY = 288
CHANNELS = ("flow", "occupancy", "speed")
DEFAULT_COLUMNS = {"sensor_id": "sensor_id", "timestamp": "timestamp", "flow": "flow",
                   "occupancy": "occupancy", "speed": "speed"}
# 2016-07-01 00:00 UTC, start of the PeMSD8 collection window
SYNTH_EPOCH = 1467331200


class DataError(ValueError):
    """Malformed or inconsistent traffic data."""


class SchemaError(DataError):
    """Required CSV columns are missing."""


@dataclass
class TrafficSeries:
    sensor_id: int
    timestamps: np.ndarray          # int64 epoch seconds
    flow: np.ndarray
    occupancy: np.ndarray | None = None
    speed: np.ndarray | None = None
    dropped_rows: int = 0

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.flow = np.asarray(self.flow, dtype=np.float64)
        if self.occupancy is not None:
            self.occupancy = np.asarray(self.occupancy, dtype=np.float64)
        if self.speed is not None:
            self.speed = np.asarray(self.speed, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.flow)

    def channel(self, name: str) -> np.ndarray:
        values = getattr(self, name, None)
        if name not in CHANNELS or values is None:
            raise DataError(f"sensor {self.sensor_id} has no channel {name!r}")
        return values

    def segment(self, start: int, stop: int) -> "TrafficSeries":
        def cut(a):
            return None if a is None else a[start:stop]
        return TrafficSeries(self.sensor_id, self.timestamps[start:stop], self.flow[start:stop],
                             cut(self.occupancy), cut(self.speed))

    def validate(self) -> None:
        ts = self.timestamps
        if len(ts) > 1:
            steps = np.diff(ts)
            bad = np.flatnonzero(steps != STEP_SECONDS)
            if bad.size:
                raise DataError(f"sensor {self.sensor_id}: timestamps leave the 5-minute grid at "
                                f"position {int(bad[0]) + 1}")
        if np.any(self.flow < 0):
            raise DataError(f"sensor {self.sensor_id}: negative flow")
        if self.occupancy is not None and np.any((self.occupancy < 0) | (self.occupancy > 1)):
            raise DataError(f"sensor {self.sensor_id}: occupancy outside [0, 1]")
        if self.speed is not None and np.any(self.speed < 0):
            raise DataError(f"sensor {self.sensor_id}: negative speed")


# -- CSV -------------------------------------------------------------------------
def _parse_time(text: str) -> int:
    text = text.strip()
    try:
        return int(float(text))
    except ValueError:
        pass
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _parse_float(text: str | None) -> float:
    if text is None or text.strip() == "" or text.strip().lower() in ("nan", "na", "null"):
        return math.nan
    return float(text)


def _fill_single_gaps(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward-fill isolated NaNs; return filled values and a keep-mask."""
    out = values.copy()
    nan = np.isnan(out)
    keep = np.ones(len(out), dtype=bool)
    i = 0
    while i < len(out):
        if nan[i]:
            j = i
            while j < len(out) and nan[j]:
                j += 1
            if j - i == 1 and i > 0:
                out[i] = out[i - 1]
            else:
                keep[i:j] = False
            i = j
        else:
            i += 1
    return out, keep


def load_csv(path, columns: dict | None = None) -> list[TrafficSeries]:
    """Read a PeMS-style CSV into one series per sensor, sorted by sensor id.

    ``columns`` maps logical names (sensor_id, timestamp, flow, occupancy,
    speed) to header names in the file. Rows with a missing flow value are
    dropped and counted on the series; single missing occupancy/speed values
    are forward-filled, longer gaps drop the rows.
    """
    cols = dict(DEFAULT_COLUMNS)
    cols.update(columns or {})
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [cols[k] for k in ("sensor_id", "timestamp", "flow") if cols[k] not in header]
        if missing:
            raise SchemaError(f"{path}: missing required column(s): {', '.join(missing)}")
        optional = [k for k in ("occupancy", "speed") if cols[k] in header]
        rows: dict[int, list] = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                sid = int(float(row[cols["sensor_id"]]))
                ts = _parse_time(row[cols["timestamp"]])
                rec = [lineno, ts, _parse_float(row[cols["flow"]])]
                rec += [_parse_float(row[cols[k]]) for k in optional]
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}: unparseable row {lineno}: {exc}") from exc
            rows.setdefault(sid, []).append(rec)

    out = []
    for sid in sorted(rows):
        recs = rows[sid]
        for prev, cur in zip(recs, recs[1:]):
            if cur[1] <= prev[1]:
                raise DataError(f"{path}: sensor {sid}: non-increasing timestamp at row {cur[0]}")
        arr = np.array([r[1:] for r in recs], dtype=np.float64)
        ts = np.array([r[1] for r in recs], dtype=np.int64)
        keep = ~np.isnan(arr[:, 1])
        extras = {}
        for i, k in enumerate(optional):
            filled, ok = _fill_single_gaps(arr[:, 2 + i])
            extras[k] = filled
            keep &= ok
        dropped = int((~keep).sum())
        series = TrafficSeries(sid, ts[keep], arr[keep, 1],
                               extras["occupancy"][keep] if "occupancy" in extras else None,
                               extras["speed"][keep] if "speed" in extras else None,
                               dropped_rows=dropped)
        if dropped:
            logger.info("sensor %s: dropped %d rows with missing values", sid, dropped)
        out.append(series)
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(series: Sequence[TrafficSeries], path) -> None:
    """Write series in the loader's default schema (epoch-second timestamps)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        has_occ = all(s.occupancy is not None for s in series)
        has_spd = all(s.speed is not None for s in series)
        header = ["sensor_id", "timestamp", "flow"] + (["occupancy"] if has_occ else []) \
            + (["speed"] if has_spd else [])
        w.writerow(header)
        for s in series:
            for i in range(len(s)):
                row = [s.sensor_id, int(s.timestamps[i]), _fmt(s.flow[i])]
                if has_occ:
                    row.append(_fmt(s.occupancy[i]))
                if has_spd:
                    row.append(_fmt(s.speed[i]))
                w.writerow(row)


def summary_table(series: Sequence[TrafficSeries]) -> list[dict]:
    """Count/mean/std/min/quartiles/max per channel, pooled over sensors."""
    rows = []
    for name in CHANNELS:
        parts = [getattr(s, name) for s in series if getattr(s, name) is not None]
        if not parts:
            continue
        v = np.concatenate(parts)
        q = np.percentile(v, [25, 50, 75])
        rows.append({"column": name, "count": int(v.size), "mean": float(v.mean()),
                     "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
                     "min": float(v.min()), "25%": float(q[0]), "50%": float(q[1]),
                     "75%": float(q[2]), "max": float(v.max())})
    return rows


# -- synthetic data ----------------------------------------------------------------
def synth_generate(days: int, sensors: int = 1, seed: int = 0,
                   start: int = SYNTH_EPOCH) -> list[TrafficSeries]:
    """Periodic synthetic traffic on the 5-minute grid.

    Flow is a daily sinusoid scaled down on weekends, plus AR(1) noise so
    that recent observations carry information the weekly average lacks.
    Occupancy and speed are derived from flow.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    rng = np.random.default_rng(seed)
    n = days * SLOTS_PER_DAY
    ts = start + STEP_SECONDS * np.arange(n, dtype=np.int64)
    slot = np.arange(n) % SLOTS_PER_DAY
    weekday = ((ts // 86400) + 3) % 7            # 1970-01-01 was a Thursday; 0 = Monday
    weekend = weekday >= 5
    out = []
    for sid in range(sensors):
        level = rng.uniform(180.0, 280.0)
        amp = rng.uniform(0.45, 0.65)
        phase = rng.uniform(-0.3, 0.3)
        daily = 1.0 + amp * np.sin(2 * np.pi * slot / SLOTS_PER_DAY - np.pi / 2 + phase)
        base = level * daily * np.where(weekend, 0.7, 1.0)
        eps = rng.normal(0.0, 9.0, n)
        noise = np.empty(n)
        acc = rng.normal(0.0, 9.0 / np.sqrt(1 - 0.95 ** 2))
        for i in range(n):
            acc = 0.95 * acc + eps[i]
            noise[i] = acc
        flow = np.maximum(base + noise, 0.0)
        occ = np.clip(flow / 2500.0 + rng.normal(0.0, 0.003, n), 0.0, 1.0)
        speed = np.clip(70.0 - 18.0 * (flow / 600.0) ** 2 + rng.normal(0.0, 0.8, n), 3.0, None)
        out.append(TrafficSeries(sid, ts, flow, occ, speed))
    return out


# -- splitting and normalisation ----------------------------------------------------
def split_bounds(length: int, fractions=(0.8, 0.1, 0.1)) -> tuple[int, int]:
    """Split points ``(a, b)``: train ``[0, a)``, val ``[a, b)``, test ``[b, length)``."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) <= 0:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    a = math.floor(fractions[0] * length)
    b = a + math.floor(fractions[1] * length)
    return a, b


def chronological_split(series: TrafficSeries, fractions=(0.8, 0.1, 0.1), min_length: int = 3):
    """Contiguous train/val/test segments; the remainder goes to test."""
    a, b = split_bounds(len(series), fractions)
    if len(series) < min_length or a == 0 or b == a or b == len(series):
        need = max(min_length, math.ceil(1 / min(fractions)))
        raise DataError(f"sensor {series.sensor_id}: series of length {len(series)} is too short "
                        f"to split; need at least {need} points")
    return series.segment(0, a), series.segment(a, b), series.segment(b, len(series))


@dataclass(frozen=True)
class NormStats:
    channels: tuple
    mean: tuple
    std: tuple

    def index(self, name: str) -> int:
        return self.channels.index(name)

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(tuple(d["channels"]), tuple(float(x) for x in d["mean"]),
                   tuple(float(x) for x in d["std"]))


def fit_normalizer(train: Sequence[TrafficSeries], channels=("flow",)) -> NormStats:
    """Population mean/std per channel over the training segments only."""
    means, stds = [], []
    channels = tuple(channels)
    if "flow" not in channels:
        channels = ("flow",) + channels
    for name in channels:
        v = np.concatenate([s.channel(name) for s in train])
        sd = float(v.std())
        if not sd > 0:
            raise DataError(f"channel {name!r} has zero variance in the training split")
        means.append(float(v.mean()))
        stds.append(sd)
    return NormStats(channels, tuple(means), tuple(stds))


def normalize(x, stats: NormStats, channel: str = "flow"):
    i = stats.index(channel)
    return (np.asarray(x, dtype=np.float64) - stats.mean[i]) / stats.std[i]


def denormalize(x, stats: NormStats, channel: str = "flow"):
    i = stats.index(channel)
    return np.asarray(x, dtype=np.float64) * stats.std[i] + stats.mean[i]


# -- windowing -----------------------------------------------------------------------
def horizon_steps(horizon_minutes: int) -> int:
    if horizon_minutes <= 0 or horizon_minutes % 5:
        raise ValueError(f"horizon must be a positive multiple of 5 minutes, got {horizon_minutes}")
    return horizon_minutes // 5


@dataclass
class WindowBatch:
    inputs: np.ndarray              # [batch, channels, window_len]
    skip_context: np.ndarray        # [batch, n_periods], oldest first
    targets: np.ndarray             # [batch, n_horizons]
    horizon_minutes: tuple
    sensor_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    target_times: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))
    input_end_times: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    norm: NormStats | None = None

    def __len__(self) -> int:
        return len(self.targets)

    def take(self, idx) -> "WindowBatch":
        return replace(self, inputs=self.inputs[idx], skip_context=self.skip_context[idx],
                       targets=self.targets[idx], sensor_ids=self.sensor_ids[idx],
                       target_times=self.target_times[idx],
                       input_end_times=self.input_end_times[idx])

    def batches(self, size: int, rng: np.random.Generator | None = None,
                drop_singletons: bool = True) -> Iterator["WindowBatch"]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for i in range(0, len(order), size):
            idx = order[i:i + size]
            if drop_singletons and len(idx) < 2:
                continue
            yield self.take(idx)

    @staticmethod
    def concat(parts: Sequence["WindowBatch"]) -> "WindowBatch":
        first = parts[0]
        return replace(first,
                       inputs=np.concatenate([p.inputs for p in parts]),
                       skip_context=np.concatenate([p.skip_context for p in parts]),
                       targets=np.concatenate([p.targets for p in parts]),
                       sensor_ids=np.concatenate([p.sensor_ids for p in parts]),
                       target_times=np.concatenate([p.target_times for p in parts]),
                       input_end_times=np.concatenate([p.input_end_times for p in parts]))


def sample_starts(length: int, window_len: int, steps: Sequence[int], skip_step: int,
                  n_periods: int) -> np.ndarray:
    """Window start indices whose skip indices do not underflow.

    The skip anchor is the furthest target ``T = start + window_len - 1 +
    max(steps)``; the sample is kept when ``T - skip_step * n_periods >= 0``.
    """
    reach = window_len - 1 + max(steps)
    first = max(0, skip_step * n_periods - reach)
    last = length - 1 - reach
    return np.arange(first, last + 1) if last >= first else np.zeros(0, dtype=np.int64)


def make_windows(series: TrafficSeries, window_len: int, horizon_minutes, skip_step: int,
                 n_periods: int, channels=("flow",), target_range: tuple | None = None,
                 norm: NormStats | None = None) -> WindowBatch:
    """Cut stride-1 samples from one series.

    For a sample whose furthest target sits at index ``T`` the skip context
    is ``[y[T - skip_step*n_periods], ..., y[T - skip_step]]``. When
    ``target_range=(lo, hi)`` is given only samples with every target in
    ``[lo, hi)`` are kept; inputs may reach back before ``lo``.
    """
    horizons = (horizon_minutes,) if np.isscalar(horizon_minutes) else tuple(horizon_minutes)
    steps = [horizon_steps(h) for h in horizons]
    if skip_step < 1 or n_periods < 1:
        raise ValueError("skip_step and n_periods must be >= 1")
    if window_len < 1:
        raise ValueError("window_len must be >= 1")
    if skip_step < max(steps):
        raise ValueError(f"skip_step {skip_step} is shorter than the longest horizon "
                         f"({max(steps)} steps); the skip context would overlap the targets")
    L = len(series)
    if skip_step * n_periods > L:
        raise DataError(f"skip history j*n = {skip_step}*{n_periods} = {skip_step * n_periods} "
                        f"exceeds the series length {L} (need j x n <= T)")
    starts = sample_starts(L, window_len, steps, skip_step, n_periods)
    last_in = starts + window_len - 1
    tgt_idx = last_in[:, None] + np.asarray(steps)[None, :]
    if target_range is not None:
        lo, hi = target_range
        keep = (tgt_idx.min(axis=1) >= lo) & (tgt_idx.max(axis=1) < hi)
        starts, last_in, tgt_idx = starts[keep], last_in[keep], tgt_idx[keep]
    y = series.flow
    chans = np.stack([series.channel(c) for c in channels])     # C, L
    if len(starts):
        win = np.lib.stride_tricks.sliding_window_view(chans, window_len, axis=1)
        inputs = win[:, starts, :].transpose(1, 0, 2).copy()
        anchor = tgt_idx.max(axis=1)
        offs = skip_step * np.arange(n_periods, 0, -1)
        skip = y[anchor[:, None] - offs[None, :]]
        targets = y[tgt_idx]
    else:
        inputs = np.zeros((0, len(channels), window_len))
        skip = np.zeros((0, n_periods))
        targets = np.zeros((0, len(steps)))
    batch = WindowBatch(inputs=inputs, skip_context=skip, targets=targets,
                        horizon_minutes=horizons,
                        sensor_ids=np.full(len(starts), series.sensor_id, dtype=np.int64),
                        target_times=series.timestamps[tgt_idx] if len(starts) else
                        np.zeros((0, len(steps)), dtype=np.int64),
                        input_end_times=series.timestamps[last_in] if len(starts) else
                        np.zeros(0, dtype=np.int64))
    return normalize_batch(batch, norm, channels) if norm is not None else batch


def normalize_batch(batch: WindowBatch, stats: NormStats, channels=("flow",)) -> WindowBatch:
    inputs = np.stack([normalize(batch.inputs[:, i, :], stats, c) for i, c in enumerate(channels)],
                      axis=1) if len(channels) else batch.inputs
    return replace(batch, inputs=inputs, skip_context=normalize(batch.skip_context, stats),
                   targets=normalize(batch.targets, stats), norm=stats)


@dataclass
class DataSpec:
    window_len: int = 12
    horizons: tuple = (10,)
    skip_step: int = 288
    n_periods: int = 7
    channels: tuple = ("flow",)
    split: tuple = (0.8, 0.1, 0.1)

    def to_dict(self) -> dict:
        return {"window_len": self.window_len, "horizons": list(self.horizons),
                "skip_step": self.skip_step, "n_periods": self.n_periods,
                "channels": list(self.channels), "split": list(self.split)}

    @classmethod
    def from_dict(cls, d: dict) -> "DataSpec":
        return cls(int(d["window_len"]), tuple(int(h) for h in d["horizons"]), int(d["skip_step"]),
                   int(d["n_periods"]), tuple(d["channels"]), tuple(float(f) for f in d["split"]))


@dataclass
class Datasets:
    train: WindowBatch
    val: WindowBatch
    test: WindowBatch
    norm: NormStats
    segments: dict                  # split name -> list of TrafficSeries


def build_datasets(series: Sequence[TrafficSeries], spec: DataSpec,
                   norm: NormStats | None = None) -> Datasets:
    """Split every sensor 80/10/10, fit the normaliser on train, cut windows.

    Passing ``norm`` (e.g. stats stored with a checkpoint) skips the fit.

    Samples are ordered by sensor id then window start. Validation and test
    samples may read inputs and skip context from earlier splits but their
    targets stay inside their own split.
    """
    series = sorted(series, key=lambda s: s.sensor_id)
    segs = {"train": [], "val": [], "test": []}
    bounds = []
    for s in series:
        s.validate()
        tr, va, te = chronological_split(s, spec.split)
        segs["train"].append(tr)
        segs["val"].append(va)
        segs["test"].append(te)
        bounds.append(split_bounds(len(s), spec.split))
    if norm is None:
        norm = fit_normalizer(segs["train"], spec.channels)
    else:
        missing = [c for c in spec.channels if c not in norm.channels]
        if missing:
            raise DataError(f"normalisation stats have no entry for channel(s) {missing}")
    out = {}
    for name in ("train", "val", "test"):
        parts = []
        for s, (a, b) in zip(series, bounds):
            rng = {"train": (0, a), "val": (a, b), "test": (b, len(s))}[name]
            parts.append(make_windows(s, spec.window_len, spec.horizons, spec.skip_step,
                                      spec.n_periods, spec.channels, rng, norm))
        batch = WindowBatch.concat(parts)
        if len(batch) == 0:
            raise DataError(f"the {name} split yields no samples; need longer series or a "
                            f"shorter window/skip history (j*n = {spec.skip_step * spec.n_periods})")
        out[name] = batch
    return Datasets(out["train"], out["val"], out["test"], norm, segs)
