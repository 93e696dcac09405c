"""
Clustered federated training.

Clients hold contiguous shards of the training split. They are grouped by
k-means on standardized shard statistics, and every cluster keeps its own
global model. A round broadcasts each cluster model to its members, trains
locally, uploads the trainable parameters, aggregates them by sample count
and applies a server optimizer step. Every payload goes through the wire
encoder, and the ledger counts the bytes that were actually produced.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import checkpoint
from .data import (
    ClientShard, FeatureScaler, TimeSeriesDataset, WindowSet, client_features,
    make_windows, partition_clients, window_features,
)
from .errors import AggregationError, ConfigError
from .model import ForecastModel, ModelConfig, loss_and_grads, mae_metric, mse_metric
from .numerics import AdamState, SGDState, adam_step, sgd_step

log = logging.getLogger(__name__)


def derive_seed(seed: int, *keys: int) -> np.random.SeedSequence:
    """Independent stream for (seed, *keys); keys are small non-negative ints."""
    return np.random.SeedSequence([int(seed), *map(int, keys)])


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))


# stream tags below the client-id range would collide, so they live far above it
STREAM_MODEL = 1 << 30
STREAM_ADAPTERS = STREAM_MODEL + 1
STREAM_KMEANS = STREAM_MODEL + 2


@dataclass(frozen=True)
class FederationConfig:
    clients: int = 4
    clusters: int = 2
    rounds: int = 100
    local_epochs: int = 5
    local_steps: int = 0  # cap on local optimizer steps per round; 0 means no cap
    batch_size: int = 512
    lr: float = 1e-3
    local_optimizer: str = "adam"
    server_optimizer: str = "fedadam"
    server_lr: float = 1e-3
    server_beta1: float = 0.9
    server_beta2: float = 0.99
    server_eps: float = 1e-3
    patience: int = 10  # 0 disables early stopping
    peft: bool = True
    pretrain_rounds: int = 0
    window_stride: int = 1
    eval_stride: int = 1
    workers: int = 1
    failures: tuple[tuple[int, int], ...] = ()  # (round, client id) pairs that drop out

    def __post_init__(self):
        object.__setattr__(self, "failures", tuple(tuple(int(v) for v in f) for f in self.failures))
        if self.clients < 1:
            raise ConfigError("need at least one client", key="federation.clients")
        if not 1 <= self.clusters <= self.clients:
            raise ConfigError(
                f"clusters must lie in [1, clients={self.clients}], got {self.clusters}", key="federation.clusters"
            )
        if self.local_optimizer not in ("adam", "sgd"):
            raise ConfigError("local_optimizer must be 'adam' or 'sgd'", key="federation.local_optimizer")
        if self.server_optimizer not in ("fedadam", "fedavg"):
            raise ConfigError("server_optimizer must be 'fedadam' or 'fedavg'", key="federation.server_optimizer")
        for key in ("rounds", "local_epochs", "local_steps", "pretrain_rounds", "patience"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0", key=f"federation.{key}")
        for key in ("batch_size", "window_stride", "eval_stride", "workers"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key=f"federation.{key}")
        if self.lr < 0 or self.server_lr < 0:
            raise ConfigError("learning rates must be >= 0", key="federation.lr")


# -----------------------------------------------------------------------------
# Clustering
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: tuple[float, ...]  # inertia after each Lloyd iteration
    iterations: int


def _sq_dist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centres = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = _sq_dist(x, np.array(centres)).min(axis=1)
        total = d2.sum()
        if total <= 0:
            # every point already coincides with a centre
            centres.append(x[rng.integers(len(x))])
            continue
        centres.append(x[rng.choice(len(x), p=d2 / total)])
    return np.array(centres)


def _repair_empty(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray, k: int) -> np.ndarray:
    labels = labels.copy()
    for c in range(k):
        if np.any(labels == c):
            continue
        d2 = ((x - centroids[labels]) ** 2).sum(axis=1)
        counts = np.bincount(labels, minlength=k)
        d2[counts[labels] <= 1] = -1.0  # never empty another cluster
        labels[int(np.argmax(d2))] = c
    return labels


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int) -> KMeansResult:
    centroids = _plus_plus(x, k, rng)
    labels = _repair_empty(x, np.argmin(_sq_dist(x, centroids), axis=1), centroids, k)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        centroids = np.array([x[labels == c].mean(axis=0) for c in range(k)])
        history.append(float(((x - centroids[labels]) ** 2).sum()))
        new = _repair_empty(x, np.argmin(_sq_dist(x, centroids), axis=1), centroids, k)
        if np.array_equal(new, labels):
            break
        labels = new
    return KMeansResult(labels, centroids, history[-1], tuple(history), it)


def kmeans(features, k: int, seed: int, max_iter: int = 300, n_init: int = 10) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations until the assignment stops changing.

    ``n_init`` seeded restarts; the lowest final inertia wins (earliest on ties).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if not 1 <= k <= n:
        raise ConfigError(f"cannot form {k} clusters from {n} points", key="federation.clusters")
    best = None
    for i in range(max(1, n_init)):
        res = _lloyd(x, k, np.random.default_rng(derive_seed(seed, STREAM_KMEANS, i)), max_iter)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def nearest_centroid(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return np.argmin(_sq_dist(np.asarray(features, dtype=np.float64), centroids), axis=1)


# -----------------------------------------------------------------------------
# Clients, aggregation and the server step
# -----------------------------------------------------------------------------


class ClientFailure(RuntimeError):
    """A client dropped out during local training."""


@dataclass
class ClientState:
    client_id: int
    shard: ClientShard
    windows: WindowSet
    cluster: int
    rng: np.random.Generator
    opt: AdamState | SGDState
    state: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return len(self.windows)


@dataclass
class ClusterModel:
    cluster_id: int
    members: tuple[int, ...]
    state: dict[str, np.ndarray]
    weights: dict[int, float]
    server: AdamState


def new_optimizer(kind: str, lr: float) -> AdamState | SGDState:
    return AdamState(lr=lr) if kind == "adam" else SGDState(lr=lr)


def local_train(model: ForecastModel, state: Mapping[str, np.ndarray], opt: AdamState | SGDState,
                windows: WindowSet, rng: np.random.Generator, epochs: int, batch_size: int,
                max_steps: int = 0, objective: str = "forecast"):
    """Shuffled mini-batch passes over ``windows``. Returns (state, opt, mean batch loss, steps)."""
    step = adam_step if isinstance(opt, AdamState) else sgd_step
    state = dict(state)
    losses = []
    n = len(windows)
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            x, y, c = windows.batch(order[i:i + batch_size])
            loss, grads = loss_and_grads(model, state, x, y, c, objective)
            state, opt = step(state, grads, opt)
            losses.append(loss)
            if max_steps and len(losses) >= max_steps:
                return state, opt, float(np.mean(losses)), len(losses)
    return state, opt, (float(np.mean(losses)) if losses else float("nan")), len(losses)


def update_device(client: ClientState, model: ForecastModel, theta_c: Mapping[str, np.ndarray],
                  local_epochs: int, lr: float | None = None, batch_size: int = 512,
                  max_steps: int = 0, objective: str = "forecast") -> tuple[dict[str, np.ndarray], float]:
    """Start from the cluster parameters and train on the client's own shard.

    The client's optimizer moments persist across rounds. Returns the updated
    trainable parameters and the mean mini-batch loss.
    """
    if len(client.windows) == 0:
        raise ClientFailure(f"client {client.client_id} has no training windows")
    opt = client.opt if lr is None else replace(client.opt, lr=lr)
    theta = {k: np.array(v) for k, v in theta_c.items()}
    theta, client.opt, loss, _ = local_train(
        model, theta, opt, client.windows, client.rng, local_epochs, batch_size, max_steps, objective
    )
    client.state = theta
    return theta, loss


def normalized_weights(weights: Mapping[int, float]) -> dict[int, float]:
    """w / sum(w), each correctly rounded from exact rational arithmetic.

    Exact arithmetic makes the result depend only on the weight ratios, so
    rescaling all weights leaves the aggregate bit-identical.
    """
    exact = {k: Fraction(float(w)) for k, w in weights.items()}
    if any(w < 0 for w in exact.values()):
        raise AggregationError("aggregation weights must be nonnegative")
    total = sum(exact.values(), Fraction(0))
    if total <= 0:
        raise AggregationError("aggregation weights sum to zero")
    return {k: float(w / total) for k, w in exact.items()}


def aggregate(states: Mapping[int, Mapping[str, np.ndarray]], weights: Mapping[int, float]) -> dict[str, np.ndarray]:
    """Weighted mean of client parameters, summed in ascending client id.

    Computed as an offset from the lowest-id member, so members holding
    identical parameters reproduce them exactly.
    """
    if not states:
        raise AggregationError("nothing to aggregate")
    ids = sorted(states)
    w = normalized_weights({i: weights[i] for i in ids})
    ref = states[ids[0]]
    out = {}
    for name, base in ref.items():
        acc = np.zeros_like(base)
        for i in ids:
            acc = acc + w[i] * (states[i][name] - base)
        out[name] = (base + acc).astype(base.dtype, copy=False)
    return out


def fedadam_step(prev: Mapping[str, np.ndarray], agg: Mapping[str, np.ndarray],
                 server: AdamState, mode: str = "fedadam") -> tuple[dict[str, np.ndarray], AdamState]:
    """Server update from the pseudo-gradient prev - agg.

    ``mode="fedavg"`` passes the aggregate through unchanged (still counting the step).
    """
    if mode == "fedavg":
        return {k: np.array(v) for k, v in agg.items()}, replace(server, step=server.step + 1)
    delta = {k: prev[k] - agg[k] for k in prev}
    return adam_step(dict(prev), delta, server)


# -----------------------------------------------------------------------------
# Communication accounting
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class Message:
    round: int
    direction: str  # "uplink" or "downlink"
    tag: str  # "adapter", "full" or "pretrain"
    client: int
    nbytes: int


@dataclass
class CommLedger:
    messages: list[Message] = field(default_factory=list)
    payload_bytes: dict[str, int] = field(default_factory=dict)

    def register_payload(self, tag: str, nbytes: int) -> None:
        self.payload_bytes[tag] = int(nbytes)

    def record(self, round_: int, direction: str, tag: str, client: int, payload: bytes) -> None:
        if direction not in ("uplink", "downlink"):
            raise ValueError(f"unknown direction {direction!r}")
        self.messages.append(Message(round_, direction, tag, client, len(payload)))

    def total(self, direction: str | None = None, tag: str | None = None,
              round_: int | None = None) -> int:
        return sum(m.nbytes for m in self.select(direction, tag, round_))

    def count(self, direction: str | None = None, tag: str | None = None,
              round_: int | None = None) -> int:
        return len(self.select(direction, tag, round_))

    def select(self, direction=None, tag=None, round_=None) -> list[Message]:
        return [
            m for m in self.messages
            if (direction is None or m.direction == direction)
            and (tag is None or m.tag == tag)
            and (round_ is None or m.round == round_)
        ]

    def cumulative(self, direction: str, tag: str | None = None) -> list[tuple[int, int]]:
        """(round, running byte total) for every round present, in order."""
        rounds = sorted({m.round for m in self.messages if tag is None or m.tag == tag})
        out, running = [], 0
        for r in rounds:
            running += self.total(direction, tag, r)
            out.append((r, running))
        return out


def ledger_report(ledger: CommLedger) -> list[dict]:
    """Per-tag totals, plus the full-model to adapter payload ratio when both sizes are known."""
    rows = []
    for tag in sorted({m.tag for m in ledger.messages}):
        msgs = ledger.select(tag=tag)
        rows.append({
            "mode": tag,
            "rounds": len({m.round for m in msgs}),
            "messages": len(msgs),
            "uplink_bytes": sum(m.nbytes for m in msgs if m.direction == "uplink"),
            "downlink_bytes": sum(m.nbytes for m in msgs if m.direction == "downlink"),
            "bytes": sum(m.nbytes for m in msgs),
            "payload_bytes": ledger.payload_bytes.get(tag, 0),
        })
    full, adapter = ledger.payload_bytes.get("full"), ledger.payload_bytes.get("adapter")
    ratio = full / adapter if full and adapter else float("nan")
    for row in rows:
        row["full_to_adapter_ratio"] = ratio
    return rows


# -----------------------------------------------------------------------------
# Round loop
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class RoundReport:
    round: int
    train_mse: dict[int, float]
    test_mse: float
    test_mae: float
    cluster_test: dict[int, tuple[float, float]]
    uplink_bytes: int
    downlink_bytes: int
    seconds: float
    skipped: tuple[int, ...] = ()
    cluster_bytes: dict[int, tuple[int, int]] = field(default_factory=dict)


ROUND_COLUMNS = ("round", "cluster", "train_mse", "test_mse", "test_mae", "uplink_bytes", "downlink_bytes", "seconds")


def round_rows(reports: Sequence[RoundReport]) -> list[dict]:
    """One row per cluster per round, then an ``all`` row with pooled test metrics and total bytes."""
    rows = []
    for rep in reports:
        for c in sorted(rep.train_mse):
            up, down = rep.cluster_bytes.get(c, (0, 0))
            mse, mae = rep.cluster_test.get(c, (float("nan"), float("nan")))
            rows.append(dict(round=rep.round, cluster=c, train_mse=rep.train_mse[c], test_mse=mse,
                             test_mae=mae, uplink_bytes=up, downlink_bytes=down, seconds=rep.seconds))
        train = [v for v in rep.train_mse.values() if np.isfinite(v)]
        rows.append(dict(round=rep.round, cluster="all", train_mse=float(np.mean(train)) if train else float("nan"),
                         test_mse=rep.test_mse, test_mae=rep.test_mae, uplink_bytes=rep.uplink_bytes,
                         downlink_bytes=rep.downlink_bytes, seconds=rep.seconds))
    return rows


def write_round_csv(reports: Sequence[RoundReport], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROUND_COLUMNS)
        w.writeheader()
        for row in round_rows(reports):
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


@dataclass(frozen=True)
class TestRouting:
    """Test windows and the cluster each one is served by."""

    windows: WindowSet
    cluster: np.ndarray

    def subset(self, stride: int) -> "TestRouting":
        if stride == 1:
            return self
        origins = np.unique(self.windows.origins)[::stride]
        keep = np.isin(self.windows.origins, origins)
        ws = replace(self.windows, origins=self.windows.origins[keep], channels=self.windows.channels[keep])
        return TestRouting(ws, self.cluster[keep])


def lookback_features(series: np.ndarray, origins: np.ndarray, lookback: int) -> np.ndarray:
    """(mean, std, slope) of the multichannel look-back block at each origin."""
    blocks = np.asarray(series)[np.asarray(origins)[:, None] + np.arange(lookback)]
    return window_features(blocks, 0.0)[:, :3]


@dataclass(frozen=True)
class WindowRouter:
    """Nearest class mean over look-back statistics.

    Fitted on training windows labelled with their client's cluster, so the
    feature noise of a short window is the same at fit and at routing time.
    """

    scaler: FeatureScaler
    means: np.ndarray  # (K, 3) in scaled space

    @classmethod
    def fit(cls, clients: Sequence[ClientState], lookback: int, k: int) -> "WindowRouter":
        feats, labels = [], []
        for c in clients:
            origins = np.unique(c.windows.origins)
            feats.append(lookback_features(c.windows.series, origins, lookback))
            labels.append(np.full(len(origins), c.cluster))
        f, lab = np.concatenate(feats), np.concatenate(labels)
        scaler = FeatureScaler.fit(f)
        z = scaler.transform(f)
        return cls(scaler, np.array([z[lab == j].mean(axis=0) for j in range(k)]))

    def route(self, windows: WindowSet) -> TestRouting:
        if len(self.means) == 1:
            return TestRouting(windows, np.zeros(len(windows), dtype=np.intp))
        origins = np.unique(windows.origins)
        z = self.scaler.transform(lookback_features(windows.series, origins, windows.lookback))
        by_origin = dict(zip(origins.tolist(), nearest_centroid(z, self.means).tolist()))
        return TestRouting(windows, np.array([by_origin[o] for o in windows.origins.tolist()], dtype=np.intp))


def single_route(windows: WindowSet) -> TestRouting:
    return TestRouting(windows, np.zeros(len(windows), dtype=np.intp))


def predict_routed(base: ForecastModel, states: Mapping[int, Mapping[str, np.ndarray]],
                   routing: TestRouting, batch_size: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    x, y, c = routing.windows.all()
    pred = np.zeros(y.shape, dtype=np.float64)
    for k, st in states.items():
        idx = np.flatnonzero(routing.cluster == k)
        if len(idx):
            pred[idx] = base.with_state(st).predict(x[idx], c[idx], batch_size)
    return pred, y


def evaluate_routed(base, states, routing: TestRouting) -> tuple[float, float, dict[int, tuple[float, float]]]:
    pred, y = predict_routed(base, states, routing)
    per = {}
    for k in states:
        idx = routing.cluster == k
        if idx.any():
            per[k] = (mse_metric(pred[idx], y[idx]), mae_metric(pred[idx], y[idx]))
    return mse_metric(pred, y), mae_metric(pred, y), per


@dataclass
class FederatedRun:
    base: ForecastModel
    clusters: dict[int, ClusterModel]
    clients: list[ClientState]
    reports: list[RoundReport]
    pretrain_reports: list[RoundReport]
    ledger: CommLedger
    kmeans: KMeansResult | None
    scaler: FeatureScaler | None
    routing: TestRouting | None
    router: "WindowRouter | None" = None
    stopped_early: bool = False
    trajectory: list[dict[int, dict[str, np.ndarray]]] = field(default_factory=list)  # per round, when recorded

    @property
    def rounds(self) -> int:
        return len(self.reports)

    def states(self) -> dict[int, dict[str, np.ndarray]]:
        return {c: m.state for c, m in self.clusters.items()}

    def cluster_model(self, c: int) -> ForecastModel:
        return self.base.with_state(self.clusters[c].state)

    def checkpoints(self) -> dict[int, bytes]:
        return {c: checkpoint.to_bytes(self.cluster_model(c), {"cluster": c}) for c in sorted(self.clusters)}


def initial_model(cfg: ModelConfig, seed: int) -> ForecastModel:
    return ForecastModel.init(cfg, int(derive_seed(seed, STREAM_MODEL).generate_state(1)[0]))


def finish_model(model: ForecastModel, seed: int, peft: bool) -> ForecastModel:
    model = model.for_forecasting()
    if peft:
        model = model.to_peft(int(derive_seed(seed, STREAM_ADAPTERS).generate_state(1)[0]))
    return model


def _decode(model: ForecastModel, payload: bytes) -> dict[str, np.ndarray]:
    shapes = {k: model.params[k].shape for k in model.trainable}
    return checkpoint.decode_state(payload, shapes, dtype=model.cfg.np_dtype)


def _round_loop(model: ForecastModel, clients: list[ClientState], clusters: dict[int, ClusterModel],
                cfg: FederationConfig, rounds: int, tag: str, ledger: CommLedger, objective: str,
                evaluate: Callable | None, executor: ThreadPoolExecutor,
                trajectory: list | None = None) -> tuple[list[RoundReport], bool]:
    names = list(model.trainable)
    by_id = {c.client_id: c for c in clients}
    failures = set(cfg.failures)
    reports: list[RoundReport] = []
    best, stale = float("inf"), 0
    model.frozen_tensors()  # build the shared read-only cache before threads touch it
    for r in range(1, rounds + 1):
        t0 = time.perf_counter()
        up0, down0 = ledger.total("uplink"), ledger.total("downlink")
        jobs = []
        cluster_bytes: dict[int, list[int]] = {}
        for cid in sorted(clusters):
            cm = clusters[cid]
            payload = checkpoint.encode_state(cm.state, names)
            received = _decode(model, payload)
            for s in cm.members:
                ledger.record(r, "downlink", tag, s, payload)
                cluster_bytes.setdefault(cid, [0, 0])[1] += len(payload)
                jobs.append((cid, s, received))

        def work(job):
            cid, s, theta = job
            if (r, s) in failures:
                raise ClientFailure(f"client {s} dropped out in round {r}")
            return update_device(by_id[s], model, theta, cfg.local_epochs, None, cfg.batch_size,
                                 cfg.local_steps, objective)

        futures = [executor.submit(work, job) for job in jobs]
        results: dict[int, dict[int, dict]] = {cid: {} for cid in clusters}
        losses: dict[int, list[float]] = {cid: [] for cid in clusters}
        skipped = []
        for (cid, s, _), fut in zip(jobs, futures):
            try:
                theta_s, loss = fut.result()
            except ClientFailure as exc:
                log.warning("round %d: %s", r, exc)
                skipped.append(s)
                continue
            payload = checkpoint.encode_state(theta_s, names)
            ledger.record(r, "uplink", tag, s, payload)
            cluster_bytes[cid][0] += len(payload)
            results[cid][s] = _decode(model, payload)
            losses[cid].append(loss)

        for cid in sorted(clusters):
            cm = clusters[cid]
            if not results[cid]:
                raise AggregationError(f"round {r}: every member of cluster {cid} failed")
            agg = aggregate(results[cid], {s: cm.weights[s] for s in results[cid]})
            cm.state, cm.server = fedadam_step(cm.state, agg, cm.server, cfg.server_optimizer)
        if trajectory is not None:
            trajectory.append({cid: {k: np.array(v) for k, v in cm.state.items()} for cid, cm in clusters.items()})

        train = {cid: (float(np.mean(v)) if v else float("nan")) for cid, v in losses.items()}
        if evaluate is not None:
            mse, mae, per = evaluate({cid: cm.state for cid, cm in clusters.items()})
        else:
            mse, mae, per = float("nan"), float("nan"), {}
        reports.append(RoundReport(
            round=r, train_mse=train, test_mse=mse, test_mae=mae, cluster_test=per,
            uplink_bytes=ledger.total("uplink") - up0, downlink_bytes=ledger.total("downlink") - down0,
            seconds=time.perf_counter() - t0, skipped=tuple(sorted(skipped)),
            cluster_bytes={c: (b[0], b[1]) for c, b in cluster_bytes.items()},
        ))
        log.info("%s round %d: train %s test mse %.5f mae %.5f", tag, r,
                 {c: round(v, 5) for c, v in train.items()}, mse, mae)
        if evaluate is not None and cfg.patience:
            if mse < best:
                best, stale = mse, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    return reports, True
    return reports, False


def make_clients(train: TimeSeriesDataset, model_cfg: ModelConfig, cfg: FederationConfig,
                 seed: int) -> list[ClientState]:
    window = model_cfg.lookback + model_cfg.horizon
    shards = partition_clients(train, cfg.clients, window)
    clients = []
    for sh in shards:
        clients.append(ClientState(
            client_id=sh.client_id,
            shard=sh,
            windows=make_windows(sh.values, model_cfg.lookback, model_cfg.horizon, cfg.window_stride),
            cluster=0,
            rng=derive_rng(seed, sh.client_id),
            opt=new_optimizer(cfg.local_optimizer, cfg.lr),
        ))
    return clients


def _server_state(cfg: FederationConfig) -> AdamState:
    return AdamState(lr=cfg.server_lr, beta1=cfg.server_beta1, beta2=cfg.server_beta2, eps=cfg.server_eps)


def _clusters_for(clients: list[ClientState], labels: np.ndarray, state: dict, cfg: FederationConfig):
    clusters = {}
    for cid in range(int(labels.max()) + 1):
        members = tuple(c.client_id for c in clients if labels[c.client_id] == cid)
        clusters[cid] = ClusterModel(
            cluster_id=cid, members=members, state={k: np.array(v) for k, v in state.items()},
            weights={s: float(clients[s].n_samples) for s in members}, server=_server_state(cfg),
        )
    return clusters


def cluster_clients(clients: list[ClientState], k: int, seed: int) -> tuple[KMeansResult, FeatureScaler]:
    raw = np.array([client_features(c.shard) for c in clients])
    scaler = FeatureScaler.fit(raw)
    result = kmeans(scaler.transform(raw), k, seed)
    for c in clients:
        c.cluster = int(result.assignments[c.client_id])
    return result, scaler


def run_federated(train: TimeSeriesDataset, test: TimeSeriesDataset | None, model_cfg: ModelConfig,
                  cfg: FederationConfig, seed: int, record_states: bool = False) -> FederatedRun:
    """Cluster clients, optionally pretrain the encoder federatedly, then train per cluster."""
    clients = make_clients(train, model_cfg, cfg, seed)
    km, scaler = cluster_clients(clients, cfg.clusters, seed)
    ledger = CommLedger()
    model = initial_model(model_cfg, seed)

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        pre_reports: list[RoundReport] = []
        if cfg.pretrain_rounds:
            pm = model.for_pretraining()
            everyone = _clusters_for(clients, np.zeros(len(clients), dtype=int), pm.trainable_state(), cfg)
            pre_reports, _ = _round_loop(pm, clients, everyone, cfg, cfg.pretrain_rounds, "pretrain",
                                         ledger, "pretrain", None, pool)
            model = pm.with_state(everyone[0].state)
            for c in clients:
                c.opt = new_optimizer(cfg.local_optimizer, cfg.lr)
        model = finish_model(model, seed, cfg.peft)

        tag = "adapter" if cfg.peft else "full"
        ledger.register_payload(tag, checkpoint.payload_size({k: model.params[k].shape for k in model.trainable}))
        ledger.register_payload("full", full_model_bytes(model))
        clusters = _clusters_for(clients, km.assignments, model.trainable_state(), cfg)

        routing, evaluate, router = None, None, None
        if test is not None:
            router = WindowRouter.fit(clients, model_cfg.lookback, cfg.clusters)
            routing = router.route(make_windows(test, model_cfg.lookback, model_cfg.horizon))
            monitor = routing.subset(cfg.eval_stride)
            evaluate = lambda states: evaluate_routed(model, states, monitor)  # noqa: E731
        trajectory: list = []
        reports, stopped = _round_loop(model, clients, clusters, cfg, cfg.rounds, tag, ledger,
                                       "forecast", evaluate, pool, trajectory if record_states else None)
    return FederatedRun(model, clusters, clients, reports, pre_reports, ledger, km, scaler, routing, router,
                        stopped, trajectory)


def full_model_bytes(model: ForecastModel) -> int:
    """Wire size if every forecasting weight were sent, quantized matrices at full precision."""
    shapes = {k: v.shape for k, v in model.params.items() if not k.startswith("pretrain.")}
    shapes.update({k: q.shape for k, q in model.quantized.items()})
    return checkpoint.payload_size(shapes)


# -----------------------------------------------------------------------------
# Centralized baseline
# -----------------------------------------------------------------------------


@dataclass
class CentralizedRun:
    model: ForecastModel
    reports: list[RoundReport]
    pretrain_reports: list[RoundReport]
    stopped_early: bool = False
    states: list[dict[str, np.ndarray]] = field(default_factory=list)  # per epoch, when recorded

    @property
    def rounds(self) -> int:
        return len(self.reports)


def run_centralized(train: TimeSeriesDataset, test: TimeSeriesDataset | None, model_cfg: ModelConfig,
                    cfg: FederationConfig, seed: int, epochs: int | None = None,
                    record_states: bool = False) -> CentralizedRun:
    """Train one model on the pooled training split; one report per epoch.

    Uses client 0's random stream and the local optimizer settings, so a
    single-client federation with a pass-through server and one local epoch
    per round follows the same trajectory.
    """
    epochs = cfg.rounds * cfg.local_epochs if epochs is None else epochs
    windows = make_windows(train.values, model_cfg.lookback, model_cfg.horizon, cfg.window_stride)
    rng = derive_rng(seed, 0)
    model = initial_model(model_cfg, seed)

    def epochs_of(m, n, objective, evaluate, eval_every=True):
        st = m.trainable_state()
        opt = new_optimizer(cfg.local_optimizer, cfg.lr)
        reports, states = [], []
        best, stale = float("inf"), 0
        for e in range(1, n + 1):
            t0 = time.perf_counter()
            st, opt, loss, _ = local_train(m, st, opt, windows, rng, 1, cfg.batch_size, cfg.local_steps, objective)
            if record_states:
                states.append({k: np.array(v) for k, v in st.items()})
            mse, mae, per = evaluate(st) if evaluate else (float("nan"), float("nan"), {})
            reports.append(RoundReport(e, {0: loss}, mse, mae, per, 0, 0, time.perf_counter() - t0))
            log.info("centralized epoch %d: train %.5f test mse %.5f", e, loss, mse)
            if evaluate is not None and cfg.patience:
                if mse < best:
                    best, stale = mse, 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        return st, reports, states, True
        return st, reports, states, False

    pre_reports = []
    if cfg.pretrain_rounds:
        pm = model.for_pretraining()
        st, pre_reports, _, _ = epochs_of(pm, cfg.pretrain_rounds, "pretrain", None)
        model = pm.with_state(st)
    model = finish_model(model, seed, cfg.peft)
    evaluate = None
    if test is not None:
        monitor = single_route(make_windows(test, model_cfg.lookback, model_cfg.horizon)).subset(cfg.eval_stride)
        evaluate = lambda st: evaluate_routed(model, {0: st}, monitor)  # noqa: E731
    st, reports, states, stopped = epochs_of(model, epochs, "forecast", evaluate)
    return CentralizedRun(model.with_state(st), reports, pre_reports, stopped, states)
