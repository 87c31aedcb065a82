import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from garnn.data import (DataError, MtsRecord, Normalizer, SplitSpec, SyntheticConfig, encode_timestamp,
                        gamma_kernel, generate_synthetic, load_csv, make_windows, prepare, read_event_masks,
                        split_record, write_csv, write_event_masks, write_metadata)


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def record(M, N=2, start="2024-03-01T00:00", interval=5, seed=0):
    rng = np.random.default_rng(seed)
    ts = np.datetime64(start, "m") + (np.arange(M) * interval).astype("timedelta64[m]")
    return MtsRecord("p", float(interval), [f"v{j}" for j in range(N)], ts, rng.normal(100, 10, (M, N)))


# --- CSV ------------------------------------------------------------------------------

def test_three_row_file(tmp_path):
    p = write(tmp_path, "timestamp,glucose,meal\n0,100,\n1,110,30\n2,120,\n")
    rec = load_csv(p)
    assert len(rec) == 3
    assert rec.names == ["glucose", "meal"]
    assert np.isnan(rec.values[0, 1]) and rec.values[1, 1] == 30.0


def test_decreasing_timestamp_cites_row(tmp_path):
    p = write(tmp_path, "timestamp,glucose\n5,100\n3,110\n")
    with pytest.raises(DataError, match="row 2"):
        load_csv(p)


def test_duplicate_timestamp_rejected(tmp_path):
    p = write(tmp_path, "timestamp,glucose\n2024-01-01T00:00,1\n2024-01-01T00:05,2\n2024-01-01T00:05,3\n")
    with pytest.raises(DataError, match="row 3"):
        load_csv(p)


def test_non_numeric_cell_cites_row(tmp_path):
    p = write(tmp_path, "timestamp,glucose,hr\n0,100,60\n1,abc,61\n")
    with pytest.raises(DataError, match="row 2.*glucose"):
        load_csv(p)


def test_unknown_column_vs_schema(tmp_path):
    p = write(tmp_path, "timestamp,glucose,steps\n0,100,5\n")
    with pytest.raises(DataError, match="steps"):
        load_csv(p, schema=["glucose", "meal"])


def test_bad_header(tmp_path):
    with pytest.raises(DataError):
        load_csv(write(tmp_path, "time,glucose\n0,1\n"))


def test_round_trip(tmp_path):
    rec = generate_synthetic(3, days=1, config=SyntheticConfig(sparse_fill="missing"))
    p = tmp_path / "r.csv"
    write_csv(rec, p)
    write_metadata(rec, p)
    back = load_csv(p)
    assert back.names == [n for n in rec.names if n not in rec.derived]
    assert back.interval == rec.interval
    np.testing.assert_array_equal(back.timestamps, rec.timestamps)
    keep = [rec.names.index(n) for n in back.names]
    np.testing.assert_array_equal(back.values, rec.values[:, keep])
    assert encode_timestamp(back).names == rec.names


def test_event_mask_round_trip(tmp_path):
    rec = generate_synthetic(1, days=2)
    p = tmp_path / "e.csv"
    write_event_masks(rec, p)
    masks = read_event_masks(p, len(rec))
    for k, v in rec.event_masks.items():
        np.testing.assert_array_equal(masks.get(k, np.zeros(len(rec), bool)), v)


def test_interval_inferred_from_wall_clock(tmp_path):
    p = write(tmp_path, "timestamp,glucose\n2024-01-01T00:00,1\n2024-01-01T00:15,2\n2024-01-01T00:30,3\n")
    assert load_csv(p).interval == 15.0


# --- timestamp channel -----------------------------------------------------------------------

@pytest.mark.parametrize("clock,expected", [("00:00", 0.0), ("12:00", 0.5), ("23:55", 1435 / 1440)])
def test_time_of_day_encoding(clock, expected):
    ts = np.array([np.datetime64(f"2024-05-05T{clock}", "m")])
    rec = MtsRecord("p", 5.0, ["glucose"], ts, np.array([[100.0]]))
    out = encode_timestamp(rec)
    assert out.names == ["glucose", "timestamp"]
    assert out.column("timestamp")[0] == expected


def test_integer_index_timestamps_scaled():
    rec = MtsRecord("p", 1.0, ["glucose"], np.arange(5), np.ones((5, 1)))
    np.testing.assert_allclose(encode_timestamp(rec).column("timestamp"), [0, 0.25, 0.5, 0.75, 1.0])


# --- normalization -------------------------------------------------------------------------

def test_normalizer_fit_invariants(rng):
    v = rng.normal(50, 7, (200, 3))
    v[rng.random(v.shape) < 0.2] = np.nan
    norm = Normalizer.fit(v)
    z = norm.transform(v)
    for j in range(3):
        col = z[~np.isnan(z[:, j]), j]
        assert abs(col.mean()) < 1e-10
        assert abs(col.std() - 1) < 1e-10
    np.testing.assert_allclose(norm.inverse_transform(z), v, rtol=0, atol=1e-10)


def test_constant_column_std_floored():
    norm = Normalizer.fit(np.ones((4, 1)))
    assert norm.std[0] == 1e-8


def test_normalizer_serialization_exact(rng):
    norm = Normalizer.fit(rng.normal(size=(10, 2)), ["a", "b"])
    back = Normalizer.from_dict(norm.to_dict())
    assert back.mean.tobytes() == norm.mean.tobytes() and back.std.tobytes() == norm.std.tobytes()


# --- windows and splits ------------------------------------------------------------------------

@pytest.mark.parametrize("M,count", [(60, 7), (54, 1)])
def test_window_counts(M, count):
    rec = record(M)
    assert len(make_windows(rec, Normalizer.identity(2), 48, 6)) == count


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 5), st.integers(0, 20))
def test_window_count_formula(T, H, extra):
    M = T + H + extra
    wins = make_windows(record(M), Normalizer.identity(2), T, H)
    assert len(wins) == M - T - H + 1
    assert all(w.X.shape == (2, T) for w in wins)


def test_window_contents_and_target():
    rec = record(20)
    norm = Normalizer.fit(rec.values)
    w = make_windows(rec, norm, 5, 3)[2]
    z = norm.transform(rec.values)
    np.testing.assert_array_equal(w.X, z[2:7].T)
    assert w.y == z[2 + 5 + 3 - 1, 0]


def test_all_missing_channel_becomes_zeros():
    rec = record(30)
    rec.values[:, 1] = np.nan
    wins = make_windows(rec, Normalizer.fit(rec.values), 10, 2)
    assert all(not w.X[1].any() for w in wins)
    assert all(np.isfinite(w.X).all() for w in wins)


def test_missing_target_windows_dropped():
    rec = record(20)
    rec.values[12, 0] = np.nan
    wins = make_windows(rec, Normalizer.identity(2), 5, 3)
    assert len(wins) == 20 - 5 - 3 + 1 - 1
    assert 12 - 5 - 3 + 1 not in [w.start for w in wins]


def test_short_record_warns_and_returns_nothing():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert make_windows(record(10), Normalizer.identity(2), 8, 3) == []
    assert caught


def test_split_is_chronological():
    rec = record(100)
    tr, va, te = split_record(rec, SplitSpec())
    assert (len(tr), len(va), len(te)) == (60, 20, 20)
    assert tr.timestamps[-1] < va.timestamps[0] < te.timestamps[0]
    assert te.meta["offset"] == 80


def test_split_fractions_validated():
    with pytest.raises(ValueError):
        SplitSpec(0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        SplitSpec(1.0, 0.0, 0.0)


def test_prepare_fits_on_training_slice_only():
    rec = record(200)
    rec.values[150:, 0] += 1000.0  # only in the test slice
    data = prepare([rec], 10, 2)
    tr = split_record(encode_timestamp(rec), SplitSpec())[0]
    np.testing.assert_allclose(data.normalizer.mean, np.nanmean(tr.values, axis=0))
    assert data.names == ["v0", "v1", "timestamp"]


# --- synthetic generator -------------------------------------------------------------------------

def test_synthetic_is_deterministic():
    a, b = generate_synthetic(7, days=2), generate_synthetic(7, days=2)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.names == ["glucose", "meal", "bolus", "heart_rate", "noise", "timestamp"]


def test_synthetic_without_events_is_sinusoid_plus_noise():
    cfg = SyntheticConfig(meals_per_day=0.0, clamp_low=-1e9, clamp_high=1e9)
    rec = generate_synthetic(2, days=2, config=cfg)
    assert not rec.event_masks["meal"].any() and not rec.event_masks["bolus"].any()
    minutes = np.arange(len(rec)) * rec.interval
    resid = rec.column("glucose") - (140 + 30 * np.sin(2 * np.pi * minutes / 1440))
    # what is left is the AR(1) noise: lag-1 autocorrelation near 0.9, sd near 3/sqrt(1-0.81)
    r1 = np.corrcoef(resid[1:], resid[:-1])[0, 1]
    assert 0.8 < r1 < 0.97
    assert 4.5 < resid.std() < 9.0


def test_synthetic_clamped_and_events_consistent():
    rec = generate_synthetic(11, days=14)
    g = rec.column("glucose")
    assert g.min() >= 40 and g.max() <= 400
    meal, bolus = rec.column("meal"), rec.column("bolus")
    np.testing.assert_array_equal(meal > 0, rec.event_masks["meal"])
    np.testing.assert_array_equal(bolus > 0, rec.event_masks["bolus"])
    carbs = meal[meal > 0]
    assert carbs.min() >= 20 and carbs.max() <= 80
    assert 2.5 < rec.event_masks["meal"].sum() / 14 < 5.5
    frac = rec.event_masks["bolus"].sum() / rec.event_masks["meal"].sum()
    assert 0.5 < frac < 0.9


def test_missing_fill_leaves_gaps():
    rec = generate_synthetic(0, days=1, config=SyntheticConfig(sparse_fill="missing"))
    meal = rec.column("meal")
    np.testing.assert_array_equal(~np.isnan(meal), rec.event_masks["meal"])


def test_gamma_kernel_shape():
    t = np.array([-5.0, 0.0, 45.0, 90.0])
    k = gamma_kernel(t, 45.0)
    assert k[0] == 0 and k[1] == 0 and k[2] == pytest.approx(1.0)
    assert 0 < k[3] < 1


def test_meal_raises_glucose_after_peak_delay():
    cfg = SyntheticConfig(meals_per_day=4, bolus_probability=0.0, ar_sigma=1e-9)
    rec = generate_synthetic(4, days=1, config=cfg)
    base = generate_synthetic(4, days=1, config=SyntheticConfig(meals_per_day=0, ar_sigma=1e-9))
    i = int(np.flatnonzero(rec.event_masks["meal"])[0])
    lift = rec.column("glucose") - base.column("glucose")
    peak = i + int(np.argmax(lift[i:i + 40]))
    assert (peak - i) * rec.interval == pytest.approx(45, abs=10)
