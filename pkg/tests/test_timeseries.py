import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hawkes_attention import tensor as T
from hawkes_attention.errors import ConfigError, DataError
from hawkes_attention.model import attention
from hawkes_attention.timeseries import (SeriesDataset, TSConfig, TSModel, TSTrainConfig, build_ts_model,
                                         forecast_normalized, load_series, load_ts_checkpoint,
                                         naive_last_value, save_ts_checkpoint, synthetic_series,
                                         ts_encode, ts_evaluate, ts_fit, ts_forecast, ts_kernels,
                                         ts_window, write_series)

from .conftest import max_rel_err, numeric_grad


def small_ds(n=200, I=12, P=4):
    v, t = synthetic_series(n, period=12.0, seed=1)
    return SeriesDataset(v, t, input_len=I, horizon=P)


def small_model(ds, **kw):
    base = dict(channels=ds.n_channels, input_len=ds.input_len, horizon=ds.horizon, d_model=8, d_k=8,
                d_v=8, n_heads=2, n_layers=1, d_ff=8, dropout=0.0)
    base.update(kw)
    return build_ts_model(TSConfig(**base), ds, seed=0)


def set_phi_to_one(model):
    for row in model.bank.nets:
        for net in row:
            for w, b in net.layers:
                w.data[:] = 0.0
                b.data[:] = 0.0
            net.layers[-1][1].data[:] = 1.0


@given(st.integers(5, 40), st.integers(1, 5), st.integers(1, 5), st.integers(1, 4))
def test_window_count_and_alignment(N, I, P, stride):
    vals = np.arange(N, dtype=float)
    if N < I + P:
        with pytest.raises(DataError):
            ts_window(vals, vals, I, P, stride)
        return
    w = ts_window(vals, vals, I, P, stride)
    assert len(w) == len(range(0, N - I - P + 1, stride))
    assert np.all(w.targets[:, 0, 0] == w.inputs[:, -1, 0] + 1)


def test_splits_and_normalization():
    ds = small_ds(n=200)
    (a, b), (c, d), (e, f) = ds.borders()
    assert (a, b) == (0, 140)
    assert c == 140 - ds.input_len and d == 160
    assert e == 160 - ds.input_len and f == 200
    train = ds.normalize(ds.values[:140])
    np.testing.assert_allclose(train.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(train.std(axis=0), 1, atol=1e-12)
    np.testing.assert_allclose(ds.denormalize(ds.normalize(ds.values)), ds.values, atol=1e-12)


def test_dataset_validation():
    v, t = synthetic_series(100)
    with pytest.raises(DataError):
        SeriesDataset(v, t[::-1])
    with pytest.raises(DataError):
        SeriesDataset(v, t, input_len=96, horizon=24)
    with pytest.raises(DataError):
        SeriesDataset(v, t, input_len=4, horizon=2, ratios=(0.5, 0.5, 0.5))


def test_csv_round_trip(tmp_path):
    v, t = synthetic_series(120, seed=2)
    write_series(tmp_path / "s.csv", v, t)
    ds = load_series(tmp_path / "s.csv", input_len=8, horizon=4)
    np.testing.assert_allclose(ds.values, v, rtol=0, atol=0)
    (tmp_path / "bad.csv").write_text("time,a\n1,x\n")
    with pytest.raises(DataError):
        load_series(tmp_path / "bad.csv")


def test_causality_exact():
    ds = small_ds()
    m = small_model(ds, n_layers=2)
    w = ds.windows("train")
    x = w.inputs[:1].copy()
    h0 = ts_encode(m, x, w.input_times[:1]).data
    for k in (3, 7, 11):
        y = x.copy()
        y[0, k:] += np.random.default_rng(k).normal(size=y[0, k:].shape)
        h1 = ts_encode(m, y, w.input_times[:1]).data
        assert np.array_equal(h0[0, :k], h1[0, :k])
        assert not np.allclose(h0[0, k:], h1[0, k:])


def test_phi_one_reduces_to_plain_attention():
    ds = small_ds()
    m = small_model(ds)
    set_phi_to_one(m)
    w = ds.windows("train")
    x_in, times = w.inputs[:3], w.input_times[:3]
    x = T.Tensor(x_in) @ m.params["proj.w"] + m.params["proj.b"]
    phis, mask = ts_kernels(m, times)
    timed = attention(m.params, "layers.0", 2, x, x, phis, mask)
    plain = attention(m.params, "layers.0", 2, x, x, [(None, None, None)] * 2, mask)
    np.testing.assert_allclose(timed.data, plain.data, rtol=1e-13, atol=1e-13)


def test_three_kernel_roles_per_head():
    ds = small_ds()
    m = small_model(ds)
    assert len(m.bank.nets) == 2 and all(len(row) == 3 for row in m.bank.nets)


def test_gradients():
    ds = small_ds(I=6, P=2)
    m = small_model(ds, d_model=4, d_k=4, d_v=4, d_ff=4)
    w = ds.windows("train")
    x, t, y = w.inputs[:2], w.input_times[:2], w.targets[:2]

    def loss():
        pred = forecast_normalized(m, ts_encode(m, x, t))
        d = pred - y
        return T.mean(d * d)

    params = m.named_parameters()
    T.backward(loss())
    for name in ("proj.w", "head.w", "layers.0.heads.1.w_k", "ts_kernels.h0.c2.out.w"):
        p = params[name]

        def f():
            with T.no_grad():
                return loss().item()

        num = numeric_grad(f, p.data)
        assert max_rel_err(p.grad, num) < 1e-4, name


def test_forecast_units():
    ds = small_ds()
    m = small_model(ds)
    w = ds.windows("test")
    h = ts_encode(m, w.inputs[:2], w.input_times[:2])
    np.testing.assert_allclose(ts_forecast(m, h), ds.denormalize(forecast_normalized(m, h).data))


def test_naive_baseline_shape():
    ds = small_ds()
    w = ds.windows("test")
    pred = naive_last_value(w)
    assert pred.shape == w.targets.shape
    assert np.all(pred[:, 0] == w.inputs[:, -1])


def test_fit_improves_and_checkpoint_round_trip(tmp_path):
    ds = small_ds()
    m = small_model(ds)
    before = ts_evaluate(m, ds, "valid")[0]
    hist = ts_fit(m, ds, TSTrainConfig(lr=5e-3, max_epochs=3, seed=1, stride=2))
    assert hist["best_valid_mse"] < before
    assert ts_evaluate(m, ds, "valid")[0] == pytest.approx(hist["best_valid_mse"], rel=1e-12)
    save_ts_checkpoint(m, tmp_path / "ts.bin")
    back = load_ts_checkpoint(tmp_path / "ts.bin")
    assert ts_evaluate(back, ds) == ts_evaluate(m, ds)
    assert isinstance(back, TSModel)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TSTrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TSTrainConfig(stride=0)
