"""Command-line entry point: ``fedpatch <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, checks
from . import config as config_mod
from .config import RunConfig
from .data import TimeSeriesDataset, bundled_dataset, load_csv, make_windows
from .errors import ConfigError, DataError, FormatError
from .experiments import (
    BENCHMARK_SHAPES, ExperimentSpec, REFERENCE_ANOMALIES, ablation_grid, baseline_metrics,
    convergence_compare, horizon_table, lookback_sweep, prepare, reference_for, run_spec, write_results,
)
from .federation import (
    FederatedRun, TestRouting, WindowRouter, full_model_bytes, ledger_report, predict_routed,
    single_route, write_round_csv,
)
from .model import ForecastModel, mae_metric, mse_metric, parameter_counts

log = logging.getLogger("fedpatch")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


# -----------------------------------------------------------------------------
# Config and data
# -----------------------------------------------------------------------------


def resolve_config(args) -> RunConfig:
    raw = config_mod.read_file(args.config) if getattr(args, "config", None) else {}
    sets = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        sets.append(f"seed={args.seed}")
    if getattr(args, "workers", None) is not None:
        sets.append(f"federation.workers={args.workers}")
    if getattr(args, "output", None):
        sets.append(f"output_dir={json.dumps(args.output)}")
    if getattr(args, "dataset", None):
        sets.append(f"data.path={json.dumps(args.dataset)}")
    if getattr(args, "mode", None):
        sets.append(f"experiment.mode={args.mode}")
    return config_mod.from_dict(config_mod.apply_overrides(raw, sets))


def load_dataset(cfg: RunConfig) -> TimeSeriesDataset:
    if not cfg.data.path:
        ds = bundled_dataset()
    else:
        path = Path(cfg.data.path)
        if not path.is_file():
            raise ConfigError(f"dataset file {path} does not exist", key="data.path")
        ds = load_csv(path)
    verify_shape(ds, cfg.data.expect_channels, cfg.data.expect_rows)
    return ds


def verify_shape(ds: TimeSeriesDataset, channels: int = 0, rows: int = 0) -> None:
    """Check declared dimensions, and the published ones when the file is a known benchmark."""
    known = BENCHMARK_SHAPES.get(ds.name)
    if known and not channels and not rows:
        channels, rows = known
    if channels and ds.n_channels != channels:
        raise DataError(f"{ds.name}: expected {channels} channels, found {ds.n_channels}")
    if rows and ds.n_rows != rows:
        raise DataError(f"{ds.name}: expected {rows} rows, found {ds.n_rows}")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_record(cfg: RunConfig, ds: TimeSeriesDataset) -> dict:
    rec = {"name": ds.name, "rows": ds.n_rows, "channels": list(ds.channels), "path": cfg.data.path or "(bundled)"}
    if cfg.data.path:
        rec["sha256"] = file_digest(cfg.data.path)
    return rec


def spec_from(cfg: RunConfig, ds: TimeSeriesDataset, **overrides) -> ExperimentSpec:
    spec = ExperimentSpec(
        dataset=ds.name, lookback=cfg.model.lookback, horizons=(cfg.model.horizon,), model=cfg.model,
        federation=cfg.federation, mode=cfg.experiment.mode, clustering=cfg.federation.clusters > 1,
        peft=cfg.federation.peft, seed=cfg.seed, split_ratio=cfg.data.split_ratio,
        standardize=cfg.data.standardize, centralized_epochs=cfg.experiment.centralized_epochs,
    )
    return replace(spec, **overrides)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


def prepare_output(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())
    return out


def write_ledger_csv(ledger, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "direction", "tag", "client", "bytes"])
        for m in ledger.messages:
            w.writerow([m.round, m.direction, m.tag, m.client, m.nbytes])


# -----------------------------------------------------------------------------
# Commands
# -----------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(cfg)
    cfg = config_mod.with_channels(cfg, ds.n_channels)
    out = prepare_output(cfg)
    spec = spec_from(cfg, ds)
    t0 = time.perf_counter()
    outcome = run_spec(ds, spec, cfg.model.horizon)
    seconds = time.perf_counter() - t0
    run = outcome.run
    write_round_csv(run.reports, out / "rounds.csv")
    write_results([outcome.row], out / "results.csv")
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    manifest = {
        "command": "train",
        "version": __version__,
        "config": cfg.to_dict(),
        "dataset": dataset_record(cfg, ds),
        "seconds": seconds,
        "result": asdict(outcome.row),
        "baselines": baseline_metrics(outcome.prep, cfg.model.lookback, cfg.model.horizon),
        "reference": reference_for(ds.name, cfg.model.horizon),
        "aggregation_weights": "client training-window counts",
        "final_round": asdict(run.reports[-1]) if run.reports else None,
        "stopped_early": run.stopped_early,
    }
    if isinstance(run, FederatedRun):
        for c, blob in run.checkpoints().items():
            (ckdir / f"cluster{c}.fpck").write_bytes(blob)
        write_ledger_csv(run.ledger, out / "ledger.csv")
        manifest["clusters"] = {c: list(m.members) for c, m in run.clusters.items()}
        manifest["router"] = (
            {"mean": run.router.scaler.mean, "std": run.router.scaler.std, "centroids": run.router.means}
            if run.router is not None else None
        )
        manifest["ledger"] = ledger_report(run.ledger)
    else:
        checkpoint.save(run.model, ckdir / "cluster0.fpck", {"cluster": 0})
        manifest["clusters"] = {0: [0]}
        manifest["router"] = None
    write_json(out / "manifest.json", manifest)
    print(json.dumps({"mse": outcome.row.mse, "mae": outcome.row.mae, "rounds": outcome.row.rounds,
                      "seconds": round(seconds, 2), "output": str(out)}))
    return EXIT_OK


def _router_from(manifest: dict) -> WindowRouter | None:
    r = manifest.get("router")
    if not r:
        return None
    from .data import FeatureScaler
    return WindowRouter(FeatureScaler(np.array(r["mean"]), np.array(r["std"])), np.array(r["centroids"]))


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run) if args.run else None
    manifest = {}
    if run_dir is not None:
        if not (run_dir / "manifest.json").is_file():
            raise ConfigError(f"{run_dir} has no manifest.json", key="run")
        manifest = json.loads((run_dir / "manifest.json").read_text())
        raw = manifest["config"]
    else:
        raw = config_mod.read_file(args.config) if args.config else {"seed": 0}
    raw = config_mod.apply_overrides(raw, list(args.set or []) + (
        [f"data.path={json.dumps(args.dataset)}"] if args.dataset else []))
    cfg = config_mod.from_dict(raw)

    if args.checkpoint:
        paths = {0: Path(args.checkpoint)}
    elif run_dir is not None:
        paths = {int(p.stem.removeprefix("cluster")): p for p in sorted((run_dir / "checkpoints").glob("cluster*.fpck"))}
    else:
        raise ConfigError("give a run directory or --checkpoint", key="checkpoint")
    for p in paths.values():
        if not p.is_file():
            raise ConfigError(f"checkpoint {p} does not exist", key="checkpoint")
    models = {c: checkpoint.load(p)[0] for c, p in paths.items()}
    base = models[min(models)]
    mcfg = base.cfg
    for key, want in (("lookback", args.lookback), ("horizon", args.horizon)):
        if want is not None and getattr(mcfg, key) != want:
            raise ConfigError(f"checkpoint has {key}={getattr(mcfg, key)}, requested {want}", key=f"model.{key}")

    ds = load_dataset(cfg)
    if ds.n_channels != mcfg.n_channels:
        raise ConfigError(f"checkpoint expects {mcfg.n_channels} channels, dataset has {ds.n_channels}",
                          key="data.path")
    prep = prepare(ds, mcfg.lookback, mcfg.horizon, cfg.data.split_ratio, cfg.data.standardize)
    windows = make_windows(prep.test, mcfg.lookback, mcfg.horizon)
    router = _router_from(manifest) if len(models) > 1 else None
    routing = router.route(windows) if router is not None else single_route(windows)
    states = {c: m.trainable_state() for c, m in models.items()}
    pred, y = predict_routed(base, states, routing)
    ch = routing.windows.channels
    per_channel = {
        name: {"mse": mse_metric(pred[ch == j], y[ch == j]), "mae": mae_metric(pred[ch == j], y[ch == j])}
        for j, name in enumerate(ds.channels)
    }
    metrics = {"mse": mse_metric(pred, y), "mae": mae_metric(pred, y), "windows": int(len(y)),
               "per_channel": per_channel}
    if args.dump_predictions:
        dump_predictions(args.dump_predictions, routing, pred, y)
    out = Path(args.output) if args.output else (run_dir / "metrics.json" if run_dir else None)
    if out is not None:
        write_json(out, metrics)
    print(json.dumps(metrics, default=_json_default))
    return EXIT_OK


def dump_predictions(path, routing: TestRouting, pred: np.ndarray, target: np.ndarray) -> None:
    t = pred.shape[1]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["origin", "channel", "cluster", *[f"pred_{i}" for i in range(t)], *[f"true_{i}" for i in range(t)]])
        for o, c, k, p, y in zip(routing.windows.origins, routing.windows.channels, routing.cluster, pred, target):
            w.writerow([int(o), int(c), int(k), *map(repr, map(float, p)), *map(repr, map(float, y))])


def read_predictions(path) -> tuple[np.ndarray, np.ndarray]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        t = sum(1 for h in header if h.startswith("pred_"))
        rows = [[float(v) for v in r[3:]] for r in reader]
    arr = np.array(rows).reshape(len(rows), 2 * t)
    return arr[:, :t], arr[:, t:]


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(cfg)
    cfg = config_mod.with_channels(cfg, ds.n_channels)
    out = prepare_output(cfg)
    grid = tuple(args.grid) if args.grid else cfg.experiment.lookbacks
    horizon = args.horizon or cfg.experiment.sweep_horizon
    rows, flags = lookback_sweep(ds, spec_from(cfg, ds), grid, horizon)
    write_results(rows, out / "sweep.csv")
    write_json(out / "manifest.json", {"command": "sweep", "version": __version__, "config": cfg.to_dict(),
                                       "dataset": dataset_record(cfg, ds), "grid": grid, "horizon": horizon,
                                       "flags": flags})
    for f in flags:
        log.warning(f)
    print(json.dumps({"rows": len(rows), "skipped": len(flags), "output": str(out / "sweep.csv")}))
    return EXIT_OK


def cmd_horizons(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(cfg)
    cfg = config_mod.with_channels(cfg, ds.n_channels)
    out = prepare_output(cfg)
    horizons = tuple(args.grid) if args.grid else cfg.experiment.horizons
    rows, flags = horizon_table(ds, spec_from(cfg, ds, horizons=horizons))
    write_results(rows, out / "horizons.csv")
    refs = {t: reference_for(ds.name, t) for t in horizons}
    anomalies = {f"{k[0]}/{k[1]}": v for k, v in REFERENCE_ANOMALIES.items() if k[0] == ds.name}
    write_json(out / "manifest.json", {"command": "horizons", "version": __version__, "config": cfg.to_dict(),
                                       "dataset": dataset_record(cfg, ds), "flags": flags,
                                       "reference": refs, "reference_anomalies": anomalies})
    print(json.dumps({"rows": len(rows), "failed": len(flags), "output": str(out / "horizons.csv")}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(cfg)
    cfg = config_mod.with_channels(cfg, ds.n_channels)
    out = prepare_output(cfg)
    rows, flags = ablation_grid(ds, spec_from(cfg, ds))
    write_results([r for _, r in rows], out / "ablation.csv")
    write_json(out / "manifest.json", {"command": "ablate", "version": __version__, "config": cfg.to_dict(),
                                       "dataset": dataset_record(cfg, ds),
                                       "variants": [name for name, _ in rows], "flags": flags})
    print(json.dumps({name: {"mse": r.mse, "mae": r.mae, "bytes": r.total_bytes} for name, r in rows}))
    return EXIT_OK


def cmd_converge(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(cfg)
    cfg = config_mod.with_channels(cfg, ds.n_channels)
    out = prepare_output(cfg)
    res = convergence_compare(ds, spec_from(cfg, ds), tolerance=cfg.experiment.target_tolerance)
    with (out / "curves.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "federated_test_mse", "centralized_test_mse", "federated_train_mse", "centralized_train_mse"])
        n = max(len(res.federated_curve), len(res.centralized_curve))
        pad = lambda seq, i: repr(seq[i]) if i < len(seq) else ""  # noqa: E731
        for i in range(n):
            w.writerow([i + 1, pad(res.federated_curve, i), pad(res.centralized_curve, i),
                        pad(res.federated_train, i), pad(res.centralized_train, i)])
    summary = {"federated_to_target": res.federated_to_target, "centralized_to_target": res.centralized_to_target,
               "speedup": res.speedup if res.speedup is not None else "not reached"}
    write_json(out / "manifest.json", {"command": "converge", "version": __version__, "config": cfg.to_dict(),
                                       "dataset": dataset_record(cfg, ds), "summary": summary})
    print(json.dumps(summary))
    return EXIT_OK


def comm_table(cfg: RunConfig, n_channels: int) -> dict:
    """Payload sizes straight from the serializer for the configured model."""
    model_cfg = replace(cfg.model, n_channels=n_channels)
    peft = ForecastModel.init(model_cfg, cfg.seed).for_forecasting().to_peft(cfg.seed)
    adapter = len(checkpoint.encode_state(peft.trainable_state(), list(peft.trainable)))
    full = full_model_bytes(peft)
    counts = parameter_counts(peft)
    return {
        "adapter_payload_bytes": adapter,
        "full_payload_bytes": full,
        "ratio": full / adapter,
        "trainable_params": counts.trainable,
        "total_params": counts.total,
        "param_ratio": counts.total / counts.trainable,
        "trainable_fraction": counts.fraction,
        "adapters": counts.adapters,
        "head": counts.head,
        "affine": counts.affine,
    }


def cmd_comm_report(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(cfg)
    out = prepare_output(cfg)
    table = comm_table(cfg, ds.n_channels)
    rows = [table]
    if args.run:
        ledger_csv = Path(args.run) / "ledger.csv"
        if not ledger_csv.is_file():
            raise ConfigError(f"{ledger_csv} does not exist", key="run")
        with ledger_csv.open(newline="") as fh:
            recs = list(csv.DictReader(fh))
        for tag in sorted({r["tag"] for r in recs}):
            sel = [r for r in recs if r["tag"] == tag]
            rows.append({"mode": tag, "messages": len(sel), "bytes": sum(int(r["bytes"]) for r in sel),
                         "rounds": len({r["round"] for r in sel})})
    with (out / "comm.csv").open("w", newline="") as fh:
        keys = list(dict.fromkeys(k for r in rows for k in r))
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    print(json.dumps(table))
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = checks.run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_RUNTIME


# -----------------------------------------------------------------------------
# Parser
# -----------------------------------------------------------------------------


def config_help() -> str:
    lines = ["configuration keys (file or --set KEY=VALUE; flags win over the file):"]
    for key, default in config_mod.defaults_table():
        lines.append(f"  {key:<32} default: {json.dumps(default, default=_json_default)}")
    return "\n".join(lines)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="root seed (overrides the file)")
    p.add_argument("--workers", type=int, help="parallel client workers")
    p.add_argument("--output", help="output directory")
    p.add_argument("--dataset", help="dataset CSV path (overrides data.path)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="fedpatch", description=__doc__, epilog=config_help(), formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="federated or centralized training run", epilog=config_help(), formatter_class=fmt)
    _common(p)
    p.add_argument("--mode", choices=["federated", "centralized"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="test metrics for a run directory or checkpoint", epilog=config_help(),
                       formatter_class=fmt)
    p.add_argument("run", nargs="?", help="run directory written by 'train'")
    p.add_argument("--checkpoint", help="single checkpoint file")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--dataset")
    p.add_argument("--lookback", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--dump-predictions", metavar="CSV")
    p.add_argument("--output", help="metrics JSON path")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="test MSE over look-back lengths", epilog=config_help(), formatter_class=fmt)
    _common(p)
    p.add_argument("--grid", type=int, nargs="+", help="look-back lengths (default: experiment.lookbacks)")
    p.add_argument("--horizon", type=int, help="fixed horizon (default: experiment.sweep_horizon)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("horizons", help="one row per forecast horizon", epilog=config_help(), formatter_class=fmt)
    _common(p)
    p.add_argument("--grid", type=int, nargs="+", help="horizons (default: experiment.horizons)")
    p.set_defaults(func=cmd_horizons)

    p = sub.add_parser("ablate", help="no-clustering / no-PEFT / full variants", epilog=config_help(),
                       formatter_class=fmt)
    _common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("converge", help="federated vs centralized learning curves", epilog=config_help(),
                       formatter_class=fmt)
    _common(p)
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("comm-report", help="payload sizes and ledger totals", epilog=config_help(), formatter_class=fmt)
    _common(p)
    p.add_argument("--run", help="run directory whose ledger.csv to summarize")
    p.set_defaults(func=cmd_comm_report)

    p = sub.add_parser("selftest", help="run the fast invariant checks")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "key": exc.key, "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, ArithmeticError, RuntimeError, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
