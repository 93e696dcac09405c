import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import tiny_config
from fedpatch import numerics as nx
from fedpatch.errors import ConfigError, DegenerateError
from fedpatch.model import (
    WIDE_CONFIG, ForecastModel, ModelConfig, closed_form_counts, dequantize, desk_config, encoder_layer,
    loss_and_grads, mae_metric, mse_loss, mse_metric, multi_head_attention, parameter_counts, patch_starts,
    patchify, quantize, self_attention,
)
import oracles


def _t(a):
    return nx.Tensor(a)


def test_self_attention_matches_loop(rng):
    for _ in range(10):
        x = rng.normal(size=(4, 6))
        w = [rng.normal(size=(6, 3)) for _ in range(3)]
        got = self_attention(_t(x), *map(_t, w)).data
        np.testing.assert_allclose(got, oracles.attention(x.tolist(), *[m.tolist() for m in w]), atol=1e-10)


def test_multi_head_matches_loop(rng):
    for _ in range(10):
        x = rng.normal(size=(5, 8))
        w = [rng.normal(size=(8, 8)) for _ in range(4)]
        got = multi_head_attention(_t(x), *map(_t, w), 4).data
        ref = oracles.multi_head(x.tolist(), *[m.tolist() for m in w], 4)
        np.testing.assert_allclose(got, ref, atol=1e-10)


def test_multi_head_with_one_head_is_attention_then_projection(rng):
    x = rng.normal(size=(3, 4))
    wq, wk, wv, wo = (rng.normal(size=(4, 4)) for _ in range(4))
    a = multi_head_attention(_t(x), _t(wq), _t(wk), _t(wv), _t(wo), 1).data
    b = self_attention(_t(x), _t(wq), _t(wk), _t(wv)).data @ wo
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_attention_rows_are_convex_combinations_of_values(rng):
    x = rng.normal(size=(6, 4))
    wv = np.eye(4)
    out = self_attention(_t(x), _t(rng.normal(size=(4, 4))), _t(rng.normal(size=(4, 4))), _t(wv)).data
    assert np.all(out <= x.max(axis=0) + 1e-12) and np.all(out >= x.min(axis=0) - 1e-12)


def test_encoder_layer_matches_loop():
    cfg = tiny_config(d_model=8, n_heads=2, d_ff=6)
    model = ForecastModel.init(cfg, 3).for_forecasting()
    w = {k: _t(v) for k, v in model.params.items()}
    x = np.random.default_rng(4).normal(size=(3, 8))
    got = encoder_layer(_t(x), w, "layer0", 2).data
    ref = oracles.encoder_layer(x.tolist(), model.params, "layer0", 2)
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_mse_mae_match_loops(rng):
    p, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    assert mse_metric(p, y) == pytest.approx(oracles.mse(p.tolist(), y.tolist()), abs=1e-12)
    assert mae_metric(p, y) == pytest.approx(oracles.mae(p.tolist(), y.tolist()), abs=1e-12)
    assert float(mse_loss(_t(p), y).data) == pytest.approx(oracles.mse(p.tolist(), y.tolist()), abs=1e-12)


def test_metrics_reject_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        mse_metric(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(nx.ShapeError):
        mae_metric(np.zeros(3), np.zeros(4))


@pytest.mark.parametrize("lookback,patch,stride,expected", [
    (16, 8, 8, [0, 8]),
    (16, 8, 4, [0, 4, 8]),
    (20, 8, 8, [0, 8, 12]),
    (8, 8, 3, [0]),
])
def test_patch_starts(lookback, patch, stride, expected):
    assert patch_starts(lookback, patch, stride).tolist() == expected


@given(st.integers(1, 64), st.integers(1, 32), st.integers(1, 32))
def test_patches_cover_the_window_and_end_at_it(lookback, patch, stride):
    if patch > lookback:
        with pytest.raises(ConfigError):
            patch_starts(lookback, patch, stride)
        return
    s = patch_starts(lookback, patch, stride)
    assert s[0] == 0 and s[-1] == lookback - patch
    assert np.all(np.diff(s) > 0) and np.all(np.diff(s) <= stride)


def test_patchify_extracts_contiguous_slices():
    cfg = tiny_config(lookback=12, patch_len=4, patch_stride=4)
    x = np.arange(24.0).reshape(2, 12)
    p = patchify(x, cfg)
    assert p.shape == (2, 3, 4)
    np.testing.assert_array_equal(p[1, 2], x[1, 8:12])


def test_config_validation():
    with pytest.raises(ConfigError) as e:
        tiny_config(d_model=7, n_heads=2)
    assert e.value.key == "model.n_heads"
    with pytest.raises(ConfigError):
        tiny_config(patch_len=32)
    with pytest.raises(ConfigError) as e:
        ModelConfig.from_dict({"lookbak": 3})
    assert e.value.key == "model.lookbak"


def test_forward_shapes_and_channel_independence(rng):
    cfg = tiny_config(n_channels=2)
    m = ForecastModel.init(cfg, 0).for_forecasting()
    state = {k: v + rng.normal(0, 0.2, v.shape) for k, v in m.trainable_state().items()}
    x = rng.normal(size=(3, 16))
    a = m.forward(x, np.array([0, 1, 0]), state=state).data
    assert a.shape == (3, 4)
    # each row depends only on its own window and channel
    b = m.forward(x[1:2], np.array([1]), state=state).data
    np.testing.assert_allclose(a[1:2], b, atol=1e-12)


def test_forward_rejects_wrong_lookback():
    m = ForecastModel.init(tiny_config(), 0).for_forecasting()
    with pytest.raises(nx.ShapeError):
        m.forward(np.zeros((1, 15)))


def test_constant_series_forecast_is_the_constant():
    m = ForecastModel.init(tiny_config(), 1).for_forecasting().to_peft(1)
    pred = m.predict(np.full((2, 16), 7.25))
    np.testing.assert_allclose(pred, 7.25, atol=1e-9)


def test_zero_gain_is_degenerate():
    m = ForecastModel.init(tiny_config(), 0).for_forecasting()
    state = m.trainable_state()
    state["revin.gain"] = np.zeros_like(state["revin.gain"])
    with pytest.raises(DegenerateError):
        m.forward(np.random.default_rng(0).normal(size=(1, 16)), state=state)


def test_gradients_through_whole_model(rng):
    cfg = tiny_config(n_channels=2, n_layers=2)
    for peft in (False, True):
        m = ForecastModel.init(cfg, 5).for_forecasting()
        if peft:
            m = m.to_peft(5)
        state = {k: v + rng.normal(0, 0.1, v.shape) for k, v in m.trainable_state().items()}
        x, y, ch = rng.normal(size=(3, 16)), rng.normal(size=(3, 4)), np.array([0, 1, 1])
        _, grads = loss_and_grads(m, state, x, y, ch)
        for name in state:
            def f(v, name=name):
                s = dict(state)
                s[name] = v
                return float(mse_loss(m.forward(x, ch, state=s), y).data)
            assert nx.max_relative_error(grads[name], nx.finite_difference_grad(f, state[name])) < 1e-4, name


def test_pretrain_objective_gradients(rng):
    cfg = tiny_config(patch_stride=8)
    m = ForecastModel.init(cfg, 2).for_pretraining()
    state = m.trainable_state()
    x = rng.normal(size=(2, 16))
    _, grads = loss_and_grads(m, state, x, None, None, objective="pretrain")
    name = "pretrain.w"

    def f(v):
        s = dict(state)
        s[name] = v
        pred, target = m.pretrain_forward(x, state=s)
        return float(mse_loss(pred, target).data)
    assert nx.max_relative_error(grads[name], nx.finite_difference_grad(f, state[name])) < 1e-6


def test_pretraining_needs_two_patches():
    m = ForecastModel.init(tiny_config(lookback=8, patch_len=8), 0)
    with pytest.raises(ConfigError):
        m.for_pretraining()


def test_zero_adapters_equal_frozen_base():
    cfg = tiny_config()
    base = ForecastModel.init(cfg, 0).for_forecasting()
    peft = base.to_peft(0)
    zero = {k: (np.zeros_like(v) if ".lora_" in k else v) for k, v in peft.trainable_state().items()}
    x = np.random.default_rng(0).normal(size=(4, 16))
    # with B=0 the adapted weight is exactly the dequantized base
    frozen = dict(base.params)
    for k, q in peft.quantized.items():
        frozen[k] = dequantize(q)
    np.testing.assert_allclose(peft.forward(x, state=zero).data,
                               ForecastModel(cfg, frozen).forward(x).data, atol=1e-12)


def test_peft_trains_only_adapters_head_and_affine():
    m = ForecastModel.init(tiny_config(), 0).for_forecasting().to_peft(0)
    for k in m.trainable:
        assert ".lora_" in k or k.startswith(("head.", "revin."))
    assert set(m.quantized) and not set(m.quantized) & set(m.params)


@given(st.integers(1, 400), st.integers(1, 80), st.sampled_from([8, 32, 64]))
def test_quantization_error_bound(n, m, block):
    w = np.random.default_rng(n * 1000 + m).normal(0, 3, size=(n, m)) if n * m < 5000 else np.ones((2, 2))
    q = quantize(w, block)
    assert q.codes.dtype == np.int8 and np.abs(q.codes.astype(int)).max() <= 127
    bound = np.repeat(q.scales.astype(np.float64) / 127.0, block)[: w.size].reshape(w.shape)
    assert np.all(np.abs(dequantize(q) - w) <= bound + 1e-9)


def test_quantize_zero_block_and_exact_extremes():
    w = np.zeros((3, 5))
    np.testing.assert_array_equal(dequantize(quantize(w)), w)
    w = np.array([[-2.0, 1.0, 2.0, 0.0]])
    d = dequantize(quantize(w, 4))
    assert d[0, 0] == pytest.approx(-2.0, abs=1e-6) and d[0, 2] == pytest.approx(2.0, abs=1e-6)


def test_parameter_counts_match_closed_form():
    for cfg in (desk_config(), desk_config(n_channels=7, lookback=64, horizon=24), tiny_config(n_layers=2)):
        m = ForecastModel.init(cfg, 0).for_forecasting().to_peft(0)
        c = parameter_counts(m)
        assert (c.trainable, c.total) == closed_form_counts(cfg)
        assert c.total == sum(v.size for v in m.params.values()) + sum(q.size for q in m.quantized.values())


def test_desk_default_ratio_at_least_fifty():
    trainable, total = closed_form_counts(desk_config())
    assert total / trainable >= 50


def test_wide_config_fraction_in_band():
    trainable, total = closed_form_counts(WIDE_CONFIG)
    assert 0.01 <= trainable / total <= 0.02


def test_lora_effective_weight(rng):
    cfg = replace(tiny_config(), lora_rank=2, lora_alpha=4.0)
    m = ForecastModel.init(cfg, 0).for_forecasting().to_peft(0)
    state = {k: v + rng.normal(0, 0.3, v.shape) for k, v in m.trainable_state().items()}
    w = m.effective(m.tensors(state))
    a, b = state["layer0.attn.q.lora_a"], state["layer0.attn.q.lora_b"]
    base = dequantize(m.quantized["layer0.attn.q"])
    scale = cfg.lora_alpha / cfg.lora_rank
    expected = base + scale * (b @ a).T
    np.testing.assert_allclose(w["layer0.attn.q"].data, expected, atol=1e-12)
    assert math.isclose(scale, 2.0)


def test_out_of_range_channel_is_shape_error():
    model = ForecastModel.init(tiny_config(), 0).for_forecasting()
    with pytest.raises(nx.ShapeError):
        model.forward(np.zeros((2, 16)), np.array([0, 1]))
