"""
Channel-independent patch transformer forecaster.

A univariate look-back window is normalized, cut into overlapping patches,
embedded (patch projection plus learned position table), passed through a
pre-norm encoder of multi-head attention and SwiGLU blocks, flattened and
mapped to the horizon by a linear head, then de-normalized.

Parameter-efficient mode freezes the encoder matrices as blockwise int8
codes and trains low-rank adapters on the attention projections together
with the head and the RevIN affine.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Iterable, Mapping

import numpy as np

from . import numerics as nx
from .data import instance_stats, revin_denormalize, revin_normalize
from .errors import ConfigError
from .numerics import GradientTape, Tensor

ATTN_MATRICES = ("q", "k", "v", "o")
FFN_MATRICES = ("w_gate", "w_up", "w_down")


@dataclass(frozen=True)
class ModelConfig:
    lookback: int = 24
    horizon: int = 8
    n_channels: int = 1
    patch_len: int = 16
    patch_stride: int = 8
    d_model: int = 128
    n_heads: int = 8
    n_layers: int = 3
    d_ff: int = 256
    lora_rank: int = 2
    lora_alpha: float = 4.0
    lora_targets: tuple[str, ...] = ATTN_MATRICES
    quant_block: int = 64
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "lora_targets", tuple(self.lora_targets))
        if self.lookback < 1 or self.horizon < 1:
            raise ConfigError("lookback and horizon must be >= 1", key="model.lookback")
        if self.patch_len > self.lookback:
            raise ConfigError(
                f"patch length {self.patch_len} exceeds look-back {self.lookback}", key="model.patch_len"
            )
        if self.patch_len < 1 or self.patch_stride < 1:
            raise ConfigError("patch length and stride must be >= 1", key="model.patch_stride")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}", key="model.n_heads"
            )
        if self.n_layers < 1:
            raise ConfigError("need at least one encoder layer", key="model.n_layers")
        if not set(self.lora_targets) <= set(ATTN_MATRICES):
            raise ConfigError(f"lora targets must be a subset of {ATTN_MATRICES}", key="model.lora_targets")
        if not 1 <= self.lora_rank <= self.d_model:
            raise ConfigError(
                f"lora rank {self.lora_rank} must lie in [1, {self.d_model}]", key="model.lora_rank"
            )
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64", key="model.dtype")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_patches(self) -> int:
        return len(patch_starts(self.lookback, self.patch_len, self.patch_stride))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model key {unknown[0]!r}", key=f"model.{unknown[0]}")
        return cls(**d)


# -----------------------------------------------------------------------------
# Patching and embedding
# -----------------------------------------------------------------------------


def patch_starts(lookback: int, patch_len: int, stride: int) -> np.ndarray:
    """Start offsets: floor((L-P)/stride)+1 regular patches, plus one patch ending at L
    when the stride does not land there exactly."""
    if patch_len > lookback:
        raise ConfigError(f"patch length {patch_len} exceeds look-back {lookback}", key="model.patch_len")
    starts = list(range(0, lookback - patch_len + 1, stride))
    if starts[-1] != lookback - patch_len:
        starts.append(lookback - patch_len)
    return np.asarray(starts, dtype=np.intp)


def patch_index(cfg: ModelConfig) -> np.ndarray:
    return patch_starts(cfg.lookback, cfg.patch_len, cfg.patch_stride)[:, None] + np.arange(cfg.patch_len)


def patchify(x, cfg: ModelConfig):
    """(..., L) -> (..., N, P). Works on Tensors (recorded) or plain arrays."""
    idx = patch_index(cfg)
    if isinstance(x, Tensor):
        return nx.take(x, idx, axis=-1)
    return np.take(np.asarray(x), idx, axis=-1)


def embed(patches, w_p: Tensor, w_pos: Tensor) -> Tensor:
    return nx.add(nx.matmul(nx.as_tensor(patches), w_p), w_pos)


# -----------------------------------------------------------------------------
# Attention and encoder
# -----------------------------------------------------------------------------


def self_attention(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V for one head."""
    q, k, v = nx.matmul(x, w_q), nx.matmul(x, w_k), nx.matmul(x, w_v)
    scores = nx.mul(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(w_q.shape[-1]))
    return nx.matmul(nx.softmax_rows(scores), v)


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    lead = t.shape[:-2]
    n, d = t.shape[-2:]
    t = nx.reshape(t, lead + (n, n_heads, d // n_heads))
    r = len(lead)
    return nx.transpose(t, tuple(range(r)) + (r + 1, r, r + 2))


def _merge_heads(t: Tensor) -> Tensor:
    lead = t.shape[:-3]
    h, n, dk = t.shape[-3:]
    r = len(lead)
    t = nx.transpose(t, tuple(range(r)) + (r + 1, r, r + 2))
    return nx.reshape(t, lead + (n, h * dk))


def multi_head_attention(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, n_heads: int) -> Tensor:
    """Concat of per-head attention outputs, times W_o.

    Head j owns columns [j*d_k, (j+1)*d_k) of the stacked D x D projections.
    """
    d = x.shape[-1]
    if d % n_heads:
        raise ConfigError(f"width {d} not divisible by {n_heads} heads")
    dk = d // n_heads
    q = _split_heads(nx.matmul(x, w_q), n_heads)
    k = _split_heads(nx.matmul(x, w_k), n_heads)
    v = _split_heads(nx.matmul(x, w_v), n_heads)
    scores = nx.mul(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(dk))
    heads = nx.matmul(nx.softmax_rows(scores), v)
    return nx.matmul(_merge_heads(heads), w_o)


def encoder_layer(x: Tensor, w: Mapping[str, Tensor], prefix: str, n_heads: int) -> Tensor:
    h = nx.layer_norm(x, w[f"{prefix}.ln1.gain"], w[f"{prefix}.ln1.bias"])
    u = nx.add(x, multi_head_attention(
        h, w[f"{prefix}.attn.q"], w[f"{prefix}.attn.k"], w[f"{prefix}.attn.v"], w[f"{prefix}.attn.o"], n_heads
    ))
    h = nx.layer_norm(u, w[f"{prefix}.ln2.gain"], w[f"{prefix}.ln2.bias"])
    return nx.add(u, nx.swiglu(h, w[f"{prefix}.ffn.w_gate"], w[f"{prefix}.ffn.w_up"], w[f"{prefix}.ffn.w_down"]))


def encoder_forward(x: Tensor, w: Mapping[str, Tensor], n_layers: int, n_heads: int) -> Tensor:
    for i in range(n_layers):
        x = encoder_layer(x, w, f"layer{i}", n_heads)
    return x


def forecast_head(z: Tensor, w_head: Tensor, b_head: Tensor) -> Tensor:
    """Flatten (..., N, D) to (..., N*D) and map linearly to the horizon."""
    lead = z.shape[:-2]
    flat = nx.reshape(z, lead + (1, -1))
    return nx.add(nx.reshape(nx.matmul(flat, w_head), lead + (w_head.shape[-1],)), b_head)


# -----------------------------------------------------------------------------
# Losses and metrics
# -----------------------------------------------------------------------------


def mse_loss(pred: Tensor, target) -> Tensor:
    target = nx.as_tensor(target) if not isinstance(target, Tensor) else target
    if pred.shape != target.shape:
        raise nx.ShapeError(f"mse: prediction shape {pred.shape} != target shape {target.shape}")
    return nx.mean_square(nx.sub(pred, target))


def mse_metric(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise nx.ShapeError(f"mse: prediction shape {pred.shape} != target shape {target.shape}")
    return float(np.mean((pred - target) ** 2))


def mae_metric(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise nx.ShapeError(f"mae: prediction shape {pred.shape} != target shape {target.shape}")
    return float(np.mean(np.abs(pred - target)))


# -----------------------------------------------------------------------------
# Quantization and adapters
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray  # int8, flat, row-major
    scales: np.ndarray  # float32 absmax per block
    shape: tuple[int, ...]
    block: int = 64

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(w, block: int = 64) -> QuantizedTensor:
    """Blockwise absmax int8: code = round(127 * w / absmax_block)."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise nx.NonFiniteError("cannot quantize non-finite weights")
    flat = w.ravel()
    n_blocks = -(-flat.size // block)
    padded = np.zeros(n_blocks * block)
    padded[: flat.size] = flat
    blocks = padded.reshape(n_blocks, block)
    scales = np.abs(blocks).max(axis=1).astype(np.float32)
    s = scales.astype(np.float64)[:, None]
    safe = np.where(s > 0, s, 1.0)
    codes = np.where(s > 0, _round_half_away(127.0 * blocks / safe), 0.0)
    codes = np.clip(codes, -127, 127).astype(np.int8).ravel()[: flat.size]
    return QuantizedTensor(codes, scales, tuple(w.shape), block)


def dequantize(q: QuantizedTensor, dtype=np.float64) -> np.ndarray:
    scale = np.repeat(q.scales.astype(np.float64), q.block)[: q.size]
    return (q.codes.astype(np.float64) * scale / 127.0).reshape(q.shape).astype(dtype)


def adapted_weight(base: Tensor, lora_a: Tensor, lora_b: Tensor, alpha: float) -> Tensor:
    """base + (alpha / r) * (B A)^T, in the x @ W convention (W is in x out)."""
    r = lora_a.shape[0]
    n_in, n_out = base.shape
    if lora_a.shape != (r, n_in) or lora_b.shape != (n_out, r):
        raise nx.ShapeError(
            f"adapter shapes A{lora_a.shape}, B{lora_b.shape} do not fit a {n_in}x{n_out} weight"
        )
    if r > min(n_in, n_out):
        raise ConfigError(f"adapter rank {r} exceeds min({n_in}, {n_out})", key="model.lora_rank")
    delta = nx.transpose(nx.matmul(lora_b, lora_a))
    return nx.add(base, nx.mul(delta, alpha / r))


def adapter_forward(x, base_q: QuantizedTensor, lora_a: Tensor, lora_b: Tensor, alpha: float) -> Tensor:
    base = Tensor(dequantize(base_q, lora_a.dtype))
    return nx.matmul(nx.as_tensor(x), adapted_weight(base, lora_a, lora_b, alpha))


# -----------------------------------------------------------------------------
# Parameters
# -----------------------------------------------------------------------------


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Forecasting parameters in their fixed declared order."""
    d, f, n = cfg.d_model, cfg.d_ff, cfg.n_patches
    shapes: dict[str, tuple[int, ...]] = {
        "revin.gain": (cfg.n_channels,),
        "revin.bias": (cfg.n_channels,),
        "embed.w_p": (cfg.patch_len, d),
        "embed.w_pos": (n, d),
    }
    for i in range(cfg.n_layers):
        p = f"layer{i}"
        shapes[f"{p}.ln1.gain"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        for m in ATTN_MATRICES:
            shapes[f"{p}.attn.{m}"] = (d, d)
        shapes[f"{p}.ln2.gain"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
        shapes[f"{p}.ffn.w_gate"] = (d, f)
        shapes[f"{p}.ffn.w_up"] = (d, f)
        shapes[f"{p}.ffn.w_down"] = (f, d)
    shapes["head.w"] = (n * d, cfg.horizon)
    shapes["head.b"] = (cfg.horizon,)
    return shapes


def pretrain_head_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {
        "pretrain.w": ((cfg.n_patches - 1) * cfg.d_model, cfg.patch_len),
        "pretrain.b": (cfg.patch_len,),
    }


def adapter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i in range(cfg.n_layers):
        for m in cfg.lora_targets:
            shapes[f"layer{i}.attn.{m}.lora_a"] = (cfg.lora_rank, cfg.d_model)
            shapes[f"layer{i}.attn.{m}.lora_b"] = (cfg.d_model, cfg.lora_rank)
    return shapes


def quantized_names(cfg: ModelConfig) -> list[str]:
    names = []
    for i in range(cfg.n_layers):
        names += [f"layer{i}.attn.{m}" for m in ATTN_MATRICES]
        names += [f"layer{i}.ffn.{m}" for m in FFN_MATRICES]
    return names


def _init_value(name: str, shape, rng: np.random.Generator, std: float) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias") or name.endswith(".b") or name.endswith(".lora_b"):
        return np.zeros(shape)
    return rng.normal(0.0, std, size=shape)


class ForecastModel:
    """Weights plus the bookkeeping of which of them train.

    ``params`` holds every floating-point weight in declared order (adapters
    included); ``quantized`` holds frozen int8 matrices. Training code keeps
    its own dict of trainable arrays and passes it to :meth:`forward`.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray],
                 quantized: dict[str, QuantizedTensor] | None = None,
                 trainable: Iterable[str] | None = None, peft: bool = False):
        self.cfg = cfg
        self.params = params
        self.quantized = dict(quantized or {})
        self.peft = peft
        self.trainable = tuple(trainable if trainable is not None else
                               [k for k in params if not k.startswith("pretrain.")])
        missing = [k for k in self.trainable if k not in params]
        if missing:
            raise KeyError(f"trainable names without parameters: {missing}")
        self._frozen: dict[str, Tensor] | None = None

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int, pretrain_head: bool = True) -> "ForecastModel":
        rng = np.random.default_rng(seed)
        shapes = dict(parameter_shapes(cfg))
        if pretrain_head and cfg.n_patches >= 2:
            shapes.update(pretrain_head_shapes(cfg))
        dt = cfg.np_dtype
        params = {k: _init_value(k, s, rng, cfg.init_std).astype(dt) for k, s in shapes.items()}
        return cls(cfg, params)

    # --- phases ---------------------------------------------------------------

    def for_pretraining(self) -> "ForecastModel":
        if "pretrain.w" not in self.params:
            raise ConfigError("next-patch pretraining needs at least 2 patches", key="model.lookback")
        names = [k for k in self.params if k.startswith(("embed.", "layer", "pretrain."))]
        return ForecastModel(self.cfg, self.params, self.quantized, names, self.peft)

    def for_forecasting(self) -> "ForecastModel":
        """Full fine-tuning: every forecasting weight trains; the pretraining head is dropped."""
        params = {k: v for k, v in self.params.items() if not k.startswith("pretrain.")}
        return ForecastModel(self.cfg, params, self.quantized, None, self.peft)

    def to_peft(self, seed: int) -> "ForecastModel":
        """Freeze and quantize encoder matrices; add adapters; train adapters, head and RevIN affine."""
        if self.peft:
            return self
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        qnames = set(quantized_names(cfg))
        quant = {k: quantize(self.params[k], cfg.quant_block) for k in quantized_names(cfg)}
        params = {k: v for k, v in self.params.items() if k not in qnames and not k.startswith("pretrain.")}
        adapters = {
            k: _init_value(k, s, rng, cfg.init_std).astype(cfg.np_dtype) for k, s in adapter_shapes(cfg).items()
        }
        # adapters sit right after their layer's other weights in the declared order
        ordered: dict[str, np.ndarray] = {}
        for k, v in params.items():
            if k == "head.w":
                ordered.update(adapters)
            ordered[k] = v
        trainable = ["revin.gain", "revin.bias", *adapters, "head.w", "head.b"]
        trainable = [k for k in ordered if k in set(trainable)]
        return ForecastModel(cfg, ordered, quant, trainable, peft=True)

    # --- state ----------------------------------------------------------------

    def trainable_state(self) -> dict[str, np.ndarray]:
        return {k: self.params[k] for k in self.trainable}

    def with_state(self, state: Mapping[str, np.ndarray]) -> "ForecastModel":
        params = dict(self.params)
        for k, v in state.items():
            if k not in params:
                raise KeyError(f"unknown parameter {k}")
            if v.shape != params[k].shape:
                raise nx.ShapeError(f"{k}: shape {v.shape} != {params[k].shape}")
            params[k] = np.asarray(v, dtype=self.cfg.np_dtype)
        out = ForecastModel(self.cfg, params, self.quantized, self.trainable, self.peft)
        out._frozen = self._frozen
        return out

    def frozen_tensors(self) -> dict[str, Tensor]:
        if self._frozen is None:
            dt = self.cfg.np_dtype
            frozen = {k: Tensor(v, name=k) for k, v in self.params.items() if k not in self.trainable}
            for k, q in self.quantized.items():
                frozen[k] = Tensor(dequantize(q, dt), name=k)
            self._frozen = frozen
        return self._frozen

    def tensors(self, state: Mapping[str, np.ndarray] | None = None,
                tape: GradientTape | None = None) -> dict[str, Tensor]:
        """Name -> Tensor for every weight; trainable ones are watched on ``tape``."""
        state = self.trainable_state() if state is None else state
        w = dict(self.frozen_tensors())
        for k in self.trainable:
            t = Tensor(state[k], name=k)
            if tape is not None:
                tape.watch(t)
            w[k] = t
        return w

    def effective(self, w: dict[str, Tensor]) -> dict[str, Tensor]:
        """Fold adapters into their base matrices."""
        if not self.peft:
            return w
        out = dict(w)
        for i in range(self.cfg.n_layers):
            for m in self.cfg.lora_targets:
                name = f"layer{i}.attn.{m}"
                out[name] = adapted_weight(w[name], w[f"{name}.lora_a"], w[f"{name}.lora_b"], self.cfg.lora_alpha)
        return out

    # --- forward --------------------------------------------------------------

    def forward(self, x, channels=None, state=None, tape: GradientTape | None = None,
                w: dict[str, Tensor] | None = None) -> Tensor:
        """(B, L) look-back windows -> (B, T) forecasts in the input's scale."""
        cfg = self.cfg
        x = np.asarray(x, dtype=cfg.np_dtype)
        if x.shape[-1] != cfg.lookback:
            raise nx.ShapeError(f"expected look-back {cfg.lookback}, got input shape {x.shape}")
        if channels is None:
            channels = np.zeros(x.shape[0], dtype=np.intp)
        elif len(channels) and not 0 <= np.min(channels) <= np.max(channels) < cfg.n_channels:
            raise nx.ShapeError(f"channel ids must lie in [0, {cfg.n_channels}), got {np.max(channels)}")
        w = self.effective(w if w is not None else self.tensors(state, tape))
        xn, rev = revin_normalize(x, w["revin.gain"], w["revin.bias"], channels)
        xd = embed(patchify(xn, cfg), w["embed.w_p"], w["embed.w_pos"])
        z = encoder_forward(xd, w, cfg.n_layers, cfg.n_heads)
        return revin_denormalize(forecast_head(z, w["head.w"], w["head.b"]), rev)

    def pretrain_forward(self, x, state=None, tape: GradientTape | None = None,
                         w: dict[str, Tensor] | None = None) -> tuple[Tensor, np.ndarray]:
        """Predict the last patch from the preceding ones (instance-normalized input).

        Returns (prediction, target), both (B, P) in the input's scale.
        """
        cfg = self.cfg
        n = cfg.n_patches
        if n < 2:
            raise ConfigError("next-patch pretraining needs at least 2 patches", key="model.lookback")
        x = np.asarray(x, dtype=cfg.np_dtype)
        mu, sd = instance_stats(x)
        patches = patchify((x - mu) / sd, cfg)
        target = patchify(x, cfg)[:, n - 1]
        w = self.effective(w if w is not None else self.tensors(state, tape))
        pos = nx.slice_(w["embed.w_pos"], slice(0, n - 1))
        xd = embed(Tensor(patches[:, : n - 1], dtype=cfg.np_dtype), w["embed.w_p"], pos)
        z = encoder_forward(xd, w, cfg.n_layers, cfg.n_heads)
        y = forecast_head(z, w["pretrain.w"], w["pretrain.b"])
        return nx.add(nx.mul(y, sd.astype(cfg.np_dtype)), mu.astype(cfg.np_dtype)), target

    def predict(self, x, channels=None, batch_size: int = 1024) -> np.ndarray:
        x = np.asarray(x)
        if channels is None:
            channels = np.zeros(len(x), dtype=np.intp)
        out = [self.forward(x[i:i + batch_size], channels[i:i + batch_size]).data
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.cfg.horizon))


def loss_and_grads(model: ForecastModel, state: Mapping[str, np.ndarray], x, y, channels,
                   objective: str = "forecast") -> tuple[float, dict[str, np.ndarray]]:
    """MSE of one mini-batch and its gradient for every trainable parameter."""
    with GradientTape() as tape:
        w = model.tensors(state, tape)
        if objective == "forecast":
            loss = mse_loss(model.forward(x, channels, w=w), np.asarray(y, dtype=model.cfg.np_dtype))
        elif objective == "pretrain":
            pred, target = model.pretrain_forward(x, w=w)
            loss = mse_loss(pred, target)
        else:
            raise ValueError(f"unknown objective {objective!r}")
    names = list(model.trainable)
    grads = tape.gradient(loss, [w[k] for k in names])
    return float(loss.data), dict(zip(names, grads))


# -----------------------------------------------------------------------------
# Accounting
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class ParameterCounts:
    adapters: int
    head: int
    affine: int
    other_trainable: int
    frozen: int
    quantized: int

    @property
    def trainable(self) -> int:
        return self.adapters + self.head + self.affine + self.other_trainable

    @property
    def total(self) -> int:
        return self.trainable + self.frozen

    @property
    def fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0


def parameter_counts(model: ForecastModel) -> ParameterCounts:
    """Itemized counts over forecasting weights; quantized matrices count at full element size."""
    counts = dict(adapters=0, head=0, affine=0, other_trainable=0, frozen=0, quantized=0)
    trainable = set(model.trainable)
    for k, v in model.params.items():
        if k.startswith("pretrain."):
            continue
        if k not in trainable:
            counts["frozen"] += v.size
        elif ".lora_" in k:
            counts["adapters"] += v.size
        elif k.startswith("head."):
            counts["head"] += v.size
        elif k.startswith("revin."):
            counts["affine"] += v.size
        else:
            counts["other_trainable"] += v.size
    for q in model.quantized.values():
        counts["frozen"] += q.size
        counts["quantized"] += q.size
    return ParameterCounts(**counts)


def trainable_fraction(model: ForecastModel) -> float:
    return parameter_counts(model).fraction


def closed_form_counts(cfg: ModelConfig) -> tuple[int, int]:
    """(trainable, total) for the parameter-efficient model, from the layer formulas."""
    d, f, n = cfg.d_model, cfg.d_ff, cfg.n_patches
    adapters = cfg.n_layers * len(cfg.lora_targets) * cfg.lora_rank * (d + d)
    head = n * d * cfg.horizon + cfg.horizon
    affine = 2 * cfg.n_channels
    per_layer = 4 * d * d + 3 * d * f + 4 * d
    total = affine + cfg.patch_len * d + n * d + cfg.n_layers * per_layer + adapters + head
    return adapters + head + affine, total


# wide, deep encoder with adapters on W_q and W_v only
WIDE_CONFIG = ModelConfig(
    lookback=336, horizon=96, n_channels=7, patch_len=16, patch_stride=16,
    d_model=1024, n_heads=16, n_layers=12, d_ff=2752,
    lora_rank=8, lora_alpha=16.0, lora_targets=("q", "v"),
)


def desk_config(**overrides) -> ModelConfig:
    return replace(ModelConfig(), **overrides)
