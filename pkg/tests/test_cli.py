import csv
import json
import time

import numpy as np
import pytest

import oracles
from fedpatch import checkpoint, cli, config
from fedpatch.data import bundled_dataset, make_windows
from fedpatch.experiments import prepare
from fedpatch.model import ForecastModel, dequantize

QUICK = ["--set", "federation.rounds=3"]


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    t0 = time.perf_counter()
    assert cli.main(["train", "--seed", "0", "--output", str(out)]) == 0
    return out, time.perf_counter() - t0


def test_default_train_is_fast_and_self_describing(trained):
    out, seconds = trained
    assert seconds < 60
    for name in ("manifest.json", "config.json", "rounds.csv", "results.csv", "ledger.csv"):
        assert (out / name).is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 0
    assert config.from_dict(manifest["config"]) == config.from_dict(json.loads((out / "config.json").read_text()))
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["cluster0.fpck", "cluster1.fpck"]


def test_evaluate_reproduces_final_round(trained, capsys):
    out, _ = trained
    code, stdout, _ = run(["evaluate", str(out)], capsys)
    assert code == 0
    metrics = json.loads(stdout)
    final = json.loads((out / "manifest.json").read_text())["final_round"]
    assert metrics["mse"] == final["test_mse"] and metrics["mae"] == final["test_mae"]
    assert set(metrics["per_channel"]) == {"load", "temp"}


def test_dumped_predictions_match_loop_oracle(trained, tmp_path, capsys):
    out, _ = trained
    dump = tmp_path / "pred.csv"
    code, stdout, _ = run(["evaluate", str(out), "--dump-predictions", str(dump)], capsys)
    assert code == 0
    metrics = json.loads(stdout)
    pred, true = cli.read_predictions(dump)
    assert metrics["mse"] == pytest.approx(oracles.mse(pred.tolist(), true.tolist()), rel=1e-12)
    assert metrics["mae"] == pytest.approx(oracles.mae(pred.tolist(), true.tolist()), rel=1e-12)


def test_evaluate_rejects_mismatched_horizon(trained, capsys):
    out, _ = trained
    code, _, err = run(["evaluate", str(out), "--horizon", "99"], capsys)
    assert code == 2 and json.loads(err)["key"] == "model.horizon"


def test_zeroed_adapters_equal_frozen_base(trained, tmp_path, capsys):
    out, _ = trained
    model, _ = checkpoint.load(out / "checkpoints" / "cluster0.fpck")
    zero = {k: (np.zeros_like(v) if ".lora_" in k else v) for k, v in model.trainable_state().items()}
    path = tmp_path / "zero.fpck"
    checkpoint.save(model.with_state(zero), path)
    dump = tmp_path / "pred.csv"
    code, _, _ = run(["evaluate", "--checkpoint", str(path), "--config", str(out / "config.json"),
                      "--dump-predictions", str(dump)], capsys)
    assert code == 0
    pred, _ = cli.read_predictions(dump)
    params = dict(model.with_state(zero).params)
    params = {k: v for k, v in params.items() if ".lora_" not in k}
    for k, q in model.quantized.items():
        params[k] = dequantize(q, np.float32)
    base = ForecastModel(model.cfg, params)
    prep = prepare(bundled_dataset(), model.cfg.lookback, model.cfg.horizon)
    x, _, c = make_windows(prep.test, model.cfg.lookback, model.cfg.horizon).all()
    np.testing.assert_allclose(pred, base.predict(x, c), atol=1e-5)


def test_missing_dataset_is_config_error(capsys, tmp_path):
    code, _, err = run(["train", "--seed", "0", "--dataset", str(tmp_path / "none.csv"),
                        "--output", str(tmp_path)], capsys)
    assert code == 2
    assert json.loads(err)["key"] == "data.path"


def test_missing_seed_and_unknown_key(capsys, tmp_path):
    code, _, err = run(["train", "--output", str(tmp_path)], capsys)
    assert code == 2 and json.loads(err)["key"] == "seed"
    code, _, err = run(["train", "--seed", "1", "--set", "federation.rouns=3", "--output", str(tmp_path)], capsys)
    assert code == 2 and json.loads(err)["key"] == "federation.rouns"


def test_wrong_shape_is_runtime_error(capsys, tmp_path):
    code, _, err = run(["train", "--seed", "0", "--set", "data.expect_channels=7", "--output", str(tmp_path)],
                       capsys)
    assert code == 1 and json.loads(err)["error"] == "DataError"


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit):
        cli.main(["train", "--help"])
    text = capsys.readouterr().out
    for key, default in config.defaults_table():
        assert key in text


def test_sweep_two_points(capsys, tmp_path):
    code, _, _ = run(["sweep", "--seed", "0", "--output", str(tmp_path), "--grid", "16", "24",
                      "--horizon", "8", *QUICK], capsys)
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "sweep.csv").open()))
    assert [r["L"] for r in rows] == ["16", "24"]


def test_ablate_three_rows(capsys, tmp_path):
    code, stdout, _ = run(["ablate", "--seed", "0", "--output", str(tmp_path), *QUICK], capsys)
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "ablation.csv").open()))
    assert len(rows) == 3
    assert set(json.loads(stdout)) == {"no_clustering", "no_peft", "full"}


def test_comm_report_ratio_is_serializer_recount(capsys, tmp_path):
    code, stdout, _ = run(["comm-report", "--seed", "0", "--output", str(tmp_path)], capsys)
    assert code == 0
    table = json.loads(stdout)
    cfg = config.with_channels(config.from_dict({"seed": 0}), 2)
    peft = ForecastModel.init(cfg.model, 0).for_forecasting().to_peft(0)
    trainable = len(checkpoint.encode_state(peft.trainable_state(), list(peft.trainable)))
    full = 4 * (sum(v.size for v in peft.params.values()) + sum(q.size for q in peft.quantized.values()))
    assert table["adapter_payload_bytes"] == trainable
    assert table["ratio"] == full / trainable
    assert table["ratio"] >= 50


def test_selftest_passes(capsys):
    code, stdout, _ = run(["selftest"], capsys)
    assert code == 0 and stdout.count("PASS") == 6


def test_train_is_reproducible(trained, tmp_path):
    out, _ = trained
    assert cli.main(["train", "--config", str(out / "config.json"), "--output", str(tmp_path)]) == 0
    for c in ("cluster0.fpck", "cluster1.fpck"):
        assert (tmp_path / "checkpoints" / c).read_bytes() == (out / "checkpoints" / c).read_bytes()
    assert (tmp_path / "results.csv").read_text() == (out / "results.csv").read_text()
