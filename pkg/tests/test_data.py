import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedpatch.data import (
    FeatureScaler, Standardizer, TimeSeriesDataset, bundled_dataset, ett_like_dataset, instance_normalize,
    load_csv, make_bundled, make_windows, partition_clients, revin_denormalize, revin_normalize,
    series_features, split_train_test, two_regime_dataset, window_features, window_origins, write_csv,
)
from fedpatch.errors import ConfigError, EmptyWindowError, FormatError, ParseError
from fedpatch.numerics import Tensor


def _ds(values, names=None):
    values = np.asarray(values, dtype=float)
    return TimeSeriesDataset(values, tuple(names or [f"c{i}" for i in range(values.shape[1])]))


def test_csv_round_trip(tmp_path):
    ds = two_regime_dataset(50, seed=3)
    write_csv(ds, tmp_path / "x.csv")
    back = load_csv(tmp_path / "x.csv")
    np.testing.assert_array_equal(back.values, ds.values)
    assert back.granularity_minutes == 60.0 and back.channels == ("value",)


@pytest.mark.parametrize("body,err", [
    ("", FormatError),
    ("date\n", FormatError),
    ("date,a\n", FormatError),
    ("date,a\n2020-01-01,1\n2020-01-01 01:00,x\n", ParseError),
    ("date,a\n2020-01-01,1\n2020-01-01 01:00,nan\n", ParseError),
    ("date,a,b\n2020-01-01,1\n", ParseError),
    ("date,a\n2020-01-02,1\n2020-01-01,2\n", FormatError),
])
def test_csv_errors(tmp_path, body, err):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(err):
        load_csv(p)


def test_parse_error_names_row_and_column(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("date,a,b\n2020-01-01,1,2\n2020-01-01 01:00,3,oops\n")
    with pytest.raises(ParseError) as e:
        load_csv(p)
    assert e.value.row == 3 and e.value.column == "b"


def test_bundled_dataset_matches_generator():
    ds = bundled_dataset()
    assert (ds.n_rows, ds.n_channels) == (200, 2)
    np.testing.assert_allclose(ds.values, make_bundled().values, atol=1e-12)
    assert ds.granularity_minutes == 60.0


def test_split_is_chronological():
    ds = _ds(np.arange(20.0)[:, None])
    tr, te = split_train_test(ds, 0.8)
    assert tr.n_rows == 16 and te.n_rows == 4
    assert tr.values[-1, 0] + 1 == te.values[0, 0]
    with pytest.raises(ConfigError):
        split_train_test(ds, 1.0)
    with pytest.raises(ConfigError):
        split_train_test(ds, 0.8, window=5)


@given(st.integers(1, 200), st.integers(1, 20), st.integers(1, 20), st.integers(1, 5))
def test_window_count(rows, lookback, horizon, stride):
    if rows < lookback + horizon:
        with pytest.raises(EmptyWindowError):
            window_origins(rows, lookback, horizon, stride)
        return
    o = window_origins(rows, lookback, horizon, stride)
    assert len(o) == (rows - lookback - horizon) // stride + 1
    assert o[-1] + lookback + horizon <= rows


def test_windows_match_loop():
    values = np.arange(30.0).reshape(10, 3)
    ws = make_windows(values, 4, 2)
    assert len(ws) == (10 - 6 + 1) * 3
    for s in ws:
        np.testing.assert_array_equal(s.input, values[s.origin:s.origin + 4, s.channel])
        np.testing.assert_array_equal(s.target, values[s.origin + 4:s.origin + 6, s.channel])


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40))
def test_revin_identity_round_trip(xs):
    x = np.array([xs])
    xn, state = revin_normalize(x, Tensor(np.ones(1)), Tensor(np.zeros(1)))
    back = revin_denormalize(xn, state).data
    np.testing.assert_allclose(back, x, atol=1e-6)


def test_revin_with_affine_and_channels(rng):
    x = rng.normal(5, 3, size=(4, 12))
    ch = np.array([0, 1, 1, 0])
    g, b = Tensor(np.array([2.0, 0.5])), Tensor(np.array([0.1, -0.3]))
    xn, st_ = revin_normalize(x, g, b, ch)
    mu, sd = x.mean(1, keepdims=True), x.std(1, keepdims=True)
    np.testing.assert_allclose(xn.data, g.data[ch][:, None] * (x - mu) / sd + b.data[ch][:, None])
    np.testing.assert_allclose(revin_denormalize(xn, st_).data, x, atol=1e-12)


def test_instance_normalize_floors_std():
    xn, mu, sd = instance_normalize(np.full((1, 5), 3.0))
    assert sd[0, 0] == 1e-5 and np.all(xn == 0)
    with pytest.raises(ConfigError):
        instance_normalize(np.ones((1, 1)))


def test_standardizer_uses_training_rows_only():
    ds = _ds(np.column_stack([np.arange(10.0), np.full(10, 2.0)]))
    sc = Standardizer.fit(ds.values[:5])
    out = sc.transform(ds).values
    np.testing.assert_allclose(out[:5, 0].mean(), 0, atol=1e-12)
    np.testing.assert_array_equal(out[:, 1], 0.0)  # constant channel keeps unit scale


@given(st.integers(1, 500), st.integers(1, 30))
def test_partition_is_disjoint_covering_balanced(rows, clients):
    values = np.arange(float(rows))[:, None]
    if rows // clients < 1:
        with pytest.raises(ConfigError):
            partition_clients(values, clients)
        return
    shards = partition_clients(values, clients)
    assert [s.client_id for s in shards] == list(range(clients))
    assert shards[0].start == 0 and shards[-1].stop == rows
    assert all(a.stop == b.start for a, b in zip(shards, shards[1:]))
    sizes = [s.n_rows for s in shards]
    assert max(sizes) - min(sizes) <= 1


def test_partition_rejects_short_shards():
    with pytest.raises(ConfigError) as e:
        partition_clients(np.zeros((20, 1)), 4, window=6)
    assert e.value.key == "federation.clients"


def test_series_features():
    f = series_features(np.column_stack([np.arange(10.0), 2 * np.arange(10.0)]))
    assert f[2] == pytest.approx(1.5)  # mean slope of 1 and 2
    assert f[3] == 10
    f = window_features(np.arange(10.0)[None, :], 3)
    assert f.shape == (1, 4) and f[0, 2] == pytest.approx(1.0) and f[0, 3] == 3


def test_feature_scaler_handles_constant_columns():
    f = np.array([[1.0, 5.0], [3.0, 5.0]])
    z = FeatureScaler.fit(f).transform(f)
    np.testing.assert_allclose(z[:, 0], [-1, 1])
    np.testing.assert_array_equal(z[:, 1], 0)


def test_two_regime_layout():
    ds = two_regime_dataset(1000, seed=0)
    v = ds.values[:, 0]
    assert v[:400].mean() > 1 and v[400:800].mean() < -1
    assert v[800:900].mean() > 1 and v[900:].mean() < -1


def test_ett_like_shape():
    ds = ett_like_dataset(300)
    assert ds.values.shape == (300, 7) and ds.channels[-1] == "OT"


def test_dataset_rejects_non_finite():
    with pytest.raises(FormatError):
        _ds([[1.0], [np.nan]])
