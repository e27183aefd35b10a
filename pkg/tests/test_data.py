import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnngruskip import data as D
from cnngruskip.data import DataError, SchemaError, TrafficSeries


def _series(values, sid=0, start=0):
    values = np.asarray(values, dtype=float)
    return TrafficSeries(sid, start + 300 * np.arange(len(values)), values)


# -- loading -----------------------------------------------------------------------
def test_load_three_row_csv(tmp_path):
    p = tmp_path / "toy.csv"
    p.write_text("sensor_id,timestamp,flow\n7,0,1.5\n7,300,2\n7,600,3\n")
    (s,) = D.load_csv(p)
    assert s.sensor_id == 7 and len(s) == 3
    assert s.flow.tolist() == [1.5, 2.0, 3.0]


def test_load_missing_flow_column(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("sensor_id,timestamp,speed\n1,0,60\n")
    with pytest.raises(SchemaError, match="flow"):
        D.load_csv(p)


def test_load_non_monotone_reports_row(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("sensor_id,timestamp,flow\n1,0,1\n1,600,1\n1,300,1\n")
    with pytest.raises(DataError, match="row 4"):
        D.load_csv(p)


def test_load_iso_timestamps_and_remap(tmp_path):
    p = tmp_path / "iso.csv"
    p.write_text("station,time,total\n3,2016-07-01T00:00:00,10\n3,2016-07-01T00:05:00,11\n")
    (s,) = D.load_csv(p, {"sensor_id": "station", "timestamp": "time", "flow": "total"})
    assert s.timestamps.tolist() == [D.SYNTH_EPOCH, D.SYNTH_EPOCH + 300]


def test_load_missing_values_policy(tmp_path):
    p = tmp_path / "gaps.csv"
    p.write_text("sensor_id,timestamp,flow,occupancy\n"
                 "1,0,1,0.1\n1,300,,0.1\n1,600,3,\n1,900,4,0.4\n1,1200,5,\n1,1500,6,\n")
    (s,) = D.load_csv(p)
    # missing flow dropped; single occupancy gap filled; two-step gap dropped
    assert s.flow.tolist() == [1.0, 3.0, 4.0]
    assert s.occupancy.tolist() == [0.1, 0.1, 0.4]
    assert s.dropped_rows == 3


def test_csv_roundtrip(tmp_path):
    series = D.synth_generate(1, 2, seed=3)
    p = tmp_path / "x.csv"
    D.write_csv(series, p)
    back = D.load_csv(p)
    for a, b in zip(series, back):
        assert a.sensor_id == b.sensor_id
        assert np.array_equal(a.flow, b.flow) and np.array_equal(a.speed, b.speed)


# -- splitting ---------------------------------------------------------------------
def test_split_100():
    tr, va, te = D.chronological_split(_series(np.arange(100.0)))
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    assert tr.timestamps.max() < va.timestamps.min() <= va.timestamps.max() < te.timestamps.min()


def test_split_101_remainder_to_test():
    assert tuple(map(len, D.chronological_split(_series(np.arange(101.0))))) == (80, 10, 11)


def test_split_too_short_names_minimum():
    with pytest.raises(DataError, match="at least"):
        D.chronological_split(_series(np.arange(5.0)))


def test_build_datasets_too_short_for_windows():
    with pytest.raises(DataError):
        D.build_datasets([_series(np.arange(10.0))], D.DataSpec(window_len=12, skip_step=2, n_periods=1))


@settings(max_examples=50)
@given(st.integers(10, 500))
def test_split_enumeration(n):
    a, b = D.split_bounds(n)
    assert a == int(0.8 * n) and b - a == int(0.1 * n) and n - b == n - a - int(0.1 * n)


# -- normalisation -----------------------------------------------------------------
def test_normalizer_hand_case():
    stats = D.fit_normalizer([_series([2.0, 4.0])])
    assert stats.mean == (3.0,) and stats.std == (1.0,)
    assert D.normalize([2.0, 4.0], stats).tolist() == [-1.0, 1.0]


def test_normalizer_zero_variance_names_channel():
    with pytest.raises(DataError, match="flow"):
        D.fit_normalizer([_series([5.0, 5.0, 5.0])])


@settings(max_examples=100)
@given(st.lists(st.floats(0, 1e4), min_size=2, max_size=50).filter(lambda v: np.std(v) > 1e-3))
def test_normalizer_roundtrip(values):
    stats = D.fit_normalizer([_series(values)])
    back = D.denormalize(D.normalize(values, stats), stats)
    assert np.max(np.abs(back - np.asarray(values))) < 1e-9


def test_normalizer_fitted_on_train_only():
    series = D.synth_generate(10, 1, seed=1)
    ds = D.build_datasets(series, D.DataSpec(window_len=12, skip_step=288, n_periods=2))
    train_only = D.fit_normalizer(ds.segments["train"])
    everything = D.fit_normalizer(series)
    assert ds.norm == train_only
    assert ds.norm != everything


# -- windowing ---------------------------------------------------------------------
def test_window_example_first_target_and_skip():
    b = D.make_windows(_series(np.arange(10.0)), 3, 5, skip_step=2, n_periods=2)
    assert b.targets[0, 0] == 4.0
    assert b.skip_context[0].tolist() == [0.0, 2.0]
    assert b.inputs[0, 0].tolist() == [1.0, 2.0, 3.0]
    assert len(b) == 6


def test_window_degenerate_skip():
    b = D.make_windows(_series(np.arange(10.0)), 3, 5, skip_step=1, n_periods=1)
    assert np.array_equal(b.skip_context[:, 0], b.targets[:, 0] - 1)


def test_window_too_short_gives_zero_samples():
    assert len(D.make_windows(_series(np.arange(3.0)), 3, 5, skip_step=1, n_periods=1)) == 0


def test_window_skip_history_too_long():
    with pytest.raises(DataError, match="j x n"):
        D.make_windows(_series(np.arange(10.0)), 3, 5, skip_step=4, n_periods=3)


def test_window_rejects_bad_horizon_and_overlapping_skip():
    s = _series(np.arange(50.0))
    with pytest.raises(ValueError, match="multiple of 5"):
        D.make_windows(s, 3, 7, skip_step=2, n_periods=2)
    with pytest.raises(ValueError, match="overlap"):
        D.make_windows(s, 3, 30, skip_step=2, n_periods=2)


@settings(max_examples=200)
@given(L=st.integers(1, 60), w=st.integers(1, 8), h=st.integers(1, 4),
       j=st.integers(1, 6), n=st.integers(1, 4))
def test_skip_index_brute_force(L, w, h, j, n):
    if j < h or j * n > L:
        return
    s = _series(np.arange(L, dtype=float) * 1.5 + 0.25)
    b = D.make_windows(s, w, 5 * h, skip_step=j, n_periods=n)
    expected = []
    for start in range(L):
        last = start + w - 1
        T = last + h
        if T >= L or T - j * n < 0:
            continue
        expected.append((s.flow[start:start + w], [s.flow[T - j * k] for k in range(n, 0, -1)],
                         s.flow[T]))
    assert len(b) == len(expected) == max(0, L - max(w + h - 1, j * n))
    for i, (inp, skip, tgt) in enumerate(expected):
        assert np.array_equal(b.inputs[i, 0], inp)
        assert b.skip_context[i].tolist() == skip
        assert b.targets[i, 0] == tgt


@settings(max_examples=100)
@given(L=st.integers(5, 80), w=st.integers(1, 6), j=st.integers(2, 5), n=st.integers(1, 3))
def test_no_leakage_within_samples(L, w, j, n):
    if j * n > L:
        return
    s = _series(np.arange(L, dtype=float))
    b = D.make_windows(s, w, (5, 10), skip_step=j, n_periods=n)
    if len(b):
        assert np.all(b.input_end_times < b.target_times.min(axis=1))
        # skip context strictly precedes every target
        assert np.all(b.skip_context.max(axis=1) < b.targets.min(axis=1))


def test_split_targets_disjoint_and_ordered():
    series = D.synth_generate(12, 2, seed=5)
    ds = D.build_datasets(series, D.DataSpec(window_len=12, skip_step=288, n_periods=3))
    for sid in (0, 1):
        ranges = []
        for part in (ds.train, ds.val, ds.test):
            t = part.target_times[part.sensor_ids == sid]
            ranges.append((t.min(), t.max()))
        assert ranges[0][1] < ranges[1][0] and ranges[1][1] < ranges[2][0]
    seg_ts = [np.concatenate([s.timestamps for s in ds.segments[k]]) for k in ("train", "val", "test")]
    assert set(seg_ts[0]).isdisjoint(seg_ts[1]) and set(seg_ts[1]).isdisjoint(seg_ts[2])


def test_batch_order_sensor_then_start():
    series = D.synth_generate(5, 3, seed=2)
    ds = D.build_datasets(series[::-1], D.DataSpec(window_len=6, skip_step=288, n_periods=1))
    sids = ds.train.sensor_ids
    assert np.all(np.diff(sids) >= 0)
    for sid in np.unique(sids):
        assert np.all(np.diff(ds.train.input_end_times[sids == sid]) == 300)


# -- synthetic generator ---------------------------------------------------------------
def test_synth_deterministic():
    a, b = D.synth_generate(3, 2, seed=9), D.synth_generate(3, 2, seed=9)
    for x, y in zip(a, b):
        assert x.flow.tobytes() == y.flow.tobytes() and x.timestamps.tobytes() == y.timestamps.tobytes()
    assert D.synth_generate(3, 1, seed=10)[0].flow.tobytes() != a[0].flow.tobytes()


def test_synth_one_day_shape_and_invariants():
    (s,) = D.synth_generate(1, 1, seed=0)
    assert len(s) == 288
    s.validate()


def test_synth_daily_autocorrelation():
    y = D.synth_generate(28, 1, seed=0)[0].flow
    y = y - y.mean()

    def acf(k):
        return float(np.dot(y[:-k], y[k:]) / np.dot(y, y))
    assert acf(288) > acf(144)


def test_summary_table_recount():
    series = D.synth_generate(2, 2, seed=1)
    rows = {r["column"]: r for r in D.summary_table(series)}
    flow = np.concatenate([s.flow for s in series])
    assert rows["flow"]["count"] == 2 * 2 * 288
    assert rows["flow"]["mean"] == pytest.approx(flow.mean(), rel=1e-12)
    assert rows["flow"]["max"] == flow.max()


def test_validate_rejects_bad_values():
    with pytest.raises(DataError):
        _series([1.0, -1.0]).validate()
    bad_grid = TrafficSeries(0, [0, 300, 900], [1.0, 1.0, 1.0])
    with pytest.raises(DataError, match="grid"):
        bad_grid.validate()
