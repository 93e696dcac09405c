"""Fast invariant checks behind ``fedpatch selftest``.

Each check returns (passed, detail). They run in seconds and use float64
except where the float32 wire format is the point.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .data import constant_dataset, instance_normalize, revin_denormalize, revin_normalize, sine_dataset
from .federation import FederationConfig, aggregate, normalized_weights, run_centralized, run_federated
from .model import ForecastModel, ModelConfig, dequantize, loss_and_grads, mse_loss, quantize


def check_gradients(n_configs: int = 3) -> tuple[bool, str]:
    worst = 0.0
    for seed in range(n_configs):
        rng = np.random.default_rng(seed)
        cfg = ModelConfig(lookback=32, horizon=4, n_channels=2, patch_len=16, patch_stride=8, d_model=4,
                          n_heads=2, n_layers=1, d_ff=8, dtype="float64")
        model = ForecastModel.init(cfg, seed).for_forecasting()
        state = {k: v + rng.normal(0, 0.1, v.shape) for k, v in model.trainable_state().items()}
        x, y = rng.normal(size=(2, 32)), rng.normal(size=(2, 4))
        ch = np.array([0, 1])
        _, grads = loss_and_grads(model, state, x, y, ch)
        for name in state:
            def f(v, name=name):
                s = dict(state)
                s[name] = v
                return float(mse_loss(model.forward(x, ch, state=s), y).data)
            worst = max(worst, nx.max_relative_error(grads[name], nx.finite_difference_grad(f, state[name])))
    return worst < 1e-4, f"max relative error {worst:.2e}"


def check_softmax() -> tuple[bool, str]:
    x = np.random.default_rng(0).normal(size=(20, 7)) * 50
    s = nx.softmax_rows(nx.Tensor(x)).data
    shifted = nx.softmax_rows(nx.Tensor(x + 123.0)).data
    err = max(np.abs(s.sum(axis=1) - 1).max(), np.abs(s - shifted).max())
    return err < 1e-12, f"row-sum / shift error {err:.1e}"


def check_round_trips() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.0, size=(50, 32))
    xn, st = revin_normalize(x, nx.Tensor(np.ones(1)), nx.Tensor(np.zeros(1)))
    rev = np.abs(revin_denormalize(xn, st).data - x).max()
    _, mu, sd = instance_normalize(x)
    w = rng.normal(size=(37, 29))
    q = quantize(w, 64)
    bound = np.repeat(q.scales.astype(np.float64) / 127.0, 64)[: w.size].reshape(w.shape)
    qerr = np.abs(dequantize(q) - w) - bound
    ok = rev < 1e-6 and qerr.max() <= 1e-9
    return ok, f"RevIN round trip {rev:.1e}, quantization bound slack {-qerr.max():.1e}"


def check_aggregation() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    states = {i: {"w": rng.normal(size=5)} for i in range(4)}
    w = {0: 3.0, 1: 1.0, 2: 7.0, 3: 2.0}
    a = aggregate(states, w)["w"]
    b = aggregate(dict(reversed(list(states.items()))), {k: 8.0 * v for k, v in w.items()})["w"]
    same = aggregate({0: {"w": np.full(3, 0.1)}, 1: {"w": np.full(3, 0.1)}, 2: {"w": np.full(3, 0.1)}},
                     {0: 1.0, 1: 1.0, 2: 1.0})["w"]
    total = sum(normalized_weights(w).values())
    ok = np.array_equal(a, b) and np.array_equal(same, np.full(3, 0.1)) and abs(total - 1) < 1e-15
    return ok, "order and scale invariance, identical-member exactness"


def check_degenerate_federation() -> tuple[bool, str]:
    ds = sine_dataset(120, channels=1)
    train, test = ds.rows(0, 96), ds.rows(96, 120)
    cfg = ModelConfig(lookback=16, horizon=4, patch_len=8, patch_stride=8, d_model=16, n_heads=2,
                      n_layers=1, d_ff=16)
    fed = FederationConfig(clients=1, clusters=1, rounds=3, local_epochs=1, batch_size=16,
                           server_optimizer="fedavg", patience=0)
    a = run_federated(train, test, cfg, fed, seed=0)
    b = run_centralized(train, test, cfg, fed, seed=0)
    diff = max(float(np.abs(a.clusters[0].state[k] - b.model.params[k]).max()) for k in a.clusters[0].state)
    return diff <= 1e-6, f"max parameter difference {diff:.1e} after 3 rounds"


def check_constant_series() -> tuple[bool, str]:
    ds = constant_dataset(60, 1, 5.0)
    cfg = ModelConfig(lookback=16, horizon=4, patch_len=8, patch_stride=8, d_model=8, n_heads=2, n_layers=1, d_ff=8)
    model = ForecastModel.init(cfg, 0).for_forecasting().to_peft(0)
    x = ds.values[:16, 0][None, :]
    pred = model.predict(x)
    err = float(np.abs(pred - 5.0).max())
    return err < 1e-3, f"constant input forecast error {err:.1e}"


CHECKS = {
    "gradients": check_gradients,
    "softmax": check_softmax,
    "round_trips": check_round_trips,
    "aggregation": check_aggregation,
    "degenerate_federation": check_degenerate_federation,
    "constant_series": check_constant_series,
}


def run_all() -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
