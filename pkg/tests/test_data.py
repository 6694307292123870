from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longcast.data import (Normalizer, SeriesFrame, WindowSpec, load_csv, make_windows, prepare_splits,
                           read_frame, split_chronological, synth_series, write_csv)
from longcast.errors import ConfigError, ContractError, DataError

ETT_HEADER = "date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n"


def _ett_rows(n, start_hour=0):
    rows = []
    for i in range(n):
        h = start_hour + i
        rows.append(f"2016-07-{1 + h // 24:02d} {h % 24:02d}:00:00," + ",".join(f"{i + c / 10:.3f}" for c in range(7)))
    return "\n".join(rows) + "\n"


def test_ett_header(tmp_path):
    path = tmp_path / "ETTh1.csv"
    path.write_text(ETT_HEADER + _ett_rows(30))
    frame = load_csv(path)
    assert frame.d_x == 7 and frame.target == "OT" and len(frame) == 30
    assert frame.columns[0] == "HUFL"
    assert frame.values[3, 6] == pytest.approx(3.6)


def test_three_row_round_trip(tmp_path):
    path = tmp_path / "tiny.csv"
    path.write_text("date,a,b\n2020-01-01 00:00:00,1.5,-2\n2020-01-01 01:00:00,0.1,3e-5\n"
                    "2020-01-01 02:00:00,7,0.3333333333333333\n")
    frame = load_csv(path, target="a")
    assert frame.target_index == 0
    assert frame.values.tolist() == [[1.5, -2.0], [0.1, 3e-5], [7.0, 0.3333333333333333]]
    assert frame.timestamps[2] == np.datetime64("2020-01-01T02:00:00")
    out = tmp_path / "again.csv"
    write_csv(frame, out)
    again = load_csv(out, target="a")
    assert np.array_equal(again.values, frame.values) and np.array_equal(again.timestamps, frame.timestamps)


@pytest.mark.parametrize("rows,message", [
    ("2020-01-01 00:00:00,1\n2020-01-01 00:00:00,2\n", "duplicate timestamp at row\\(s\\) 3"),
    ("2020-01-01 00:00:00,1\n2020-01-01 03:00:00,2\n", "gap in timestamps at row\\(s\\) 3"),
    ("2020-01-01 01:00:00,1\n2020-01-01 00:00:00,2\n", "out of order"),
    ("2020-01-01 00:00:00,1\n2020-01-01 01:00:00,\n", "missing values at row\\(s\\) 3"),
    ("2020-01-01 00:00:00,abc\n", "non-numeric"),
    ("2020-01-01 00:00,1\n", "unparseable"),
])
def test_bad_csv_rejected(tmp_path, rows, message):
    path = tmp_path / "bad.csv"
    path.write_text("date,v\n" + rows)
    with pytest.raises(DataError, match=message):
        load_csv(path)


def test_missing_file():
    with pytest.raises(DataError):
        read_frame("/nonexistent/file.csv")


def test_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("time,v\n2020-01-01 00:00:00,1\n")
    with pytest.raises(DataError, match="date"):
        load_csv(path)


def test_unknown_target_column(tmp_path):
    path = tmp_path / "ok.csv"
    path.write_text("date,v\n2020-01-01 00:00:00,1\n")
    with pytest.raises(ConfigError):
        load_csv(path, target="OT")


def test_month_split_on_month_edges():
    frame = synth_series(length=610 * 24, start="2016-07-01 00:00:00")
    train, val, test = split_chronological(frame, months=(12, 4, 4))
    assert train.timestamps[0] == np.datetime64("2016-07-01T00:00:00")
    assert val.timestamps[0] == np.datetime64("2017-07-01T00:00:00")
    assert test.timestamps[0] == np.datetime64("2017-11-01T00:00:00")
    assert test.timestamps[-1] == np.datetime64("2018-02-28T23:00:00")
    hours = lambda a, b: int((np.datetime64(b) - np.datetime64(a)) // np.timedelta64(1, "h"))
    assert len(train) == hours("2016-07-01", "2017-07-01")
    assert len(val) == hours("2017-07-01", "2017-11-01")
    assert (train.split, val.split, test.split) == ("train", "val", "test")


def test_months_beyond_span():
    with pytest.raises(ConfigError):
        split_chronological(synth_series(length=100 * 24), months=(12, 4, 4))


def test_ratio_split():
    parts = split_chronological(synth_series(length=1000), ratios=(0.7, 0.1, 0.2))
    assert [len(p) for p in parts] == [700, 100, 200]
    assert parts[1].timestamps[0] - parts[0].timestamps[-1] == np.timedelta64(3600, "s")


@pytest.mark.parametrize("ratios", [(0.7, 0.2, 0.2), (0.5, -0.1, 0.2), (0.5, 0.5)])
def test_bad_ratios(ratios):
    with pytest.raises(ConfigError):
        split_chronological(synth_series(length=100), ratios=ratios)


@settings(max_examples=100, deadline=None)
@given(st.integers(10, 500), st.floats(0, 1), st.floats(0, 1))
def test_ratio_splits_are_contiguous(length, a, b):
    r = (a * 0.5, b * 0.5 * (1 - a * 0.5), 0.0)
    r = (r[0], r[1], max(0.0, 1 - r[0] - r[1] - 1e-9))
    parts = split_chronological(synth_series(length=length), ratios=r)
    joined = np.concatenate([p.timestamps for p in parts])
    frame = synth_series(length=length)
    assert np.array_equal(joined, frame.timestamps[:len(joined)])


def test_window_counts():
    frame = synth_series(length=100)
    assert len(make_windows(frame, WindowSpec(48, 24, 24))) == 29
    assert len(make_windows(frame.slice(0, 72, "full"), WindowSpec(48, 24, 24))) == 1
    assert len(make_windows(frame, WindowSpec(48, 24, 24, stride=24))) == 2


def test_window_slices_and_batch():
    frame = synth_series(length=100, d_x=3)
    ws = make_windows(frame, WindowSpec(48, 24, 24), features="S")
    enc, token, target = ws.slices(5)
    assert (enc, token, target) == (slice(5, 53), slice(29, 53), slice(53, 77))
    batch = ws.batch([5])
    assert np.array_equal(batch.x_enc[0], frame.values[5:53])
    assert np.array_equal(batch.y[0, :, 0], frame.values[53:77, 2])
    assert np.array_equal(batch.stamps_future[0], frame.stamps()[53:77])


def test_windows_exhaustive_and_unique():
    frame = synth_series(length=90)
    ws = make_windows(frame, WindowSpec(20, 10, 5))
    assert ws.starts.tolist() == list(range(90 - 25 + 1))


def test_short_split_rejected():
    with pytest.raises(DataError, match="needs at least"):
        make_windows(synth_series(length=50), WindowSpec(48, 24, 24))


def test_window_spec_validation():
    with pytest.raises(ConfigError):
        WindowSpec(48, 49, 24)
    with pytest.raises(ConfigError):
        WindowSpec(48, 24, 0)


def test_windows_never_cross_splits():
    data = prepare_splits(synth_series(length=1000), WindowSpec(48, 24, 24))
    for ws in (data.train, data.val, data.test):
        b = ws.batch()
        lo, hi = ws.frame.timestamps[0], ws.frame.timestamps[-1]
        assert b.timestamps_future.max() <= hi and ws.frame.timestamps[ws.starts].min() >= lo
    assert data.train.frame.timestamps[-1] < data.val.frame.timestamps[0]


def test_synth_deterministic_and_spacing():
    a, b = synth_series(length=500, d_x=3, seed=4), synth_series(length=500, d_x=3, seed=4)
    assert a.fingerprint() == b.fingerprint() and np.array_equal(a.values, b.values)
    assert synth_series(length=500, d_x=3, seed=5).fingerprint() != a.fingerprint()
    assert np.all(np.diff(a.timestamps).astype(np.int64) == 3600)
    assert a.columns[-1] == "OT" and a.target == "OT"


def test_multisine_variance():
    frame = synth_series("multisine", length=10_000, d_x=4, seed=0)
    var = frame.values.var(axis=0)
    assert np.all(np.abs(var - 1.5) <= 0.1), var


def test_trend_noise_kind():
    frame = synth_series("trend+noise", length=2000, d_x=2, seed=1)
    assert frame.values.shape == (2000, 2)
    assert abs(frame.values.std() - 1.0) < 0.1


def test_synth_bad_kind():
    with pytest.raises(ConfigError):
        synth_series("walk")


def test_normalizer_inverse_and_statistics():
    frame = synth_series(length=1000, d_x=3, seed=2)
    train, val, _ = split_chronological(frame, ratios=(0.7, 0.1, 0.2))
    norm = Normalizer.fit(train)
    z = norm.apply(train.values)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)
    assert np.max(np.abs(norm.inverse(norm.apply(val.values)) - val.values)) <= 1e-12
    np.testing.assert_allclose(norm.inverse(z[:, 2:], channels=[2]), train.values[:, 2:], atol=1e-12)
    again = Normalizer.from_dict(norm.to_dict())
    assert np.array_equal(again.mean, norm.mean) and np.array_equal(again.std, norm.std)


def test_normalizer_train_only():
    frame = synth_series(length=100)
    with pytest.raises(ContractError):
        Normalizer.fit(frame)
    with pytest.raises(ContractError):
        Normalizer.fit(frame.slice(0, 50, "val"))


def test_constant_column_rejected():
    frame = SeriesFrame(np.arange(10).astype("datetime64[h]").astype("datetime64[s]"),
                        np.column_stack([np.arange(10.0), np.full(10, 3.0)]), ("a", "flat"), split="train")
    with pytest.raises(DataError, match="flat"):
        Normalizer.fit(frame)


def test_prepared_splits_use_train_statistics():
    frame = synth_series(length=1000, d_x=2, seed=3)
    data = prepare_splits(frame, WindowSpec(48, 24, 24))
    train = frame.values[:700]
    np.testing.assert_allclose(data.normalizer.mean, train.mean(axis=0), atol=1e-14)
    np.testing.assert_allclose(data.test.frame.values, (frame.values[800:] - train.mean(0)) / train.std(0),
                               atol=1e-12)


def test_quarter_hourly_stamps():
    frame = synth_series(length=8, granularity="quarter-hourly", start="2016-07-01 00:00:00")
    assert frame.stamps()[:, 4].tolist() == [0, 1, 2, 3, 0, 1, 2, 3]
    assert frame.stamps()[5].tolist() == [6, 0, 4, 1, 1]
    assert datetime(2016, 7, 1).weekday() == 4
