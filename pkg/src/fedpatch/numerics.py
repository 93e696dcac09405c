"""
Dense tensors with a reverse-mode gradient tape, plus Adam/SGD updates.

Tensors wrap read-only numpy arrays. Operations performed while a
``GradientTape`` is active are recorded on it when at least one input is
watched (or derived from a watched tensor); ``tape.gradient`` replays the
record in reverse.

    with GradientTape() as tape:
        tape.watch(w)
        loss = mean_square(matmul(x, w) - y)
    (grad_w,) = tape.gradient(loss, [w])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar target, no active tape...)."""


# -----------------------------------------------------------------------------
# Tensor
# -----------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # no copy; caller guarantees ownership
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        # python scalars adopt the dtype of the other operand later via numpy promotion
        return Tensor._wrap(np.asarray(x, dtype=np.float64))
    return Tensor(x, dtype=dtype)


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=ref.dtype)


# -----------------------------------------------------------------------------
# Tape
# -----------------------------------------------------------------------------

_local = threading.local()


def _tape_stack() -> list["GradientTape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "GradientTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradientTape:
    """Ordered record of primitive operations for reverse-mode differentiation.

    A tape belongs to the thread that entered it.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: set[int] = set()
        self.watched: list[Tensor] = []

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("gradient tapes must exit in LIFO order")
        stack.pop()

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if id(t) not in self._tracked:
                self._tracked.add(id(t))
                self.watched.append(t)

    def tracks(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def __len__(self) -> int:
        return len(self._ops)

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], vjp: Callable) -> None:
        self._tracked.add(id(out))
        self._ops.append((out, parents, vjp))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar ``target`` with respect to ``sources``.

        Sources that do not influence the target get zero arrays.
        """
        if target.data.size != 1:
            raise TapeError(f"gradient target must be a scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for out, parents, vjp in reversed(self._ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, gp in zip(parents, vjp(g)):
                if gp is None or id(parent) not in self._tracked:
                    continue
                key = id(parent)
                grads[key] = grads[key] + gp if key in grads else gp
        result = []
        for s in sources:
            g = grads.get(id(s))
            result.append(np.zeros_like(s.data) if g is None else g.reshape(s.shape))
        return result


def backward(tape: GradientTape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients for every watched tensor, keyed by tensor name (or position)."""
    grads = tape.gradient(loss, tape.watched)
    return {(t.name if t.name else str(i)): g for i, (t, g) in enumerate(zip(tape.watched, grads))}


_check_finite = True


def set_finite_checks(enabled: bool) -> None:
    global _check_finite
    _check_finite = enabled


def _result(arr: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if _check_finite and not np.all(np.isfinite(arr)):
        raise NonFiniteError("operation produced non-finite values")
    out = Tensor._wrap(np.asarray(arr))
    tape = active_tape()
    if tape is not None and any(tape.tracks(p) for p in parents):
        tape._record(out, parents, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -----------------------------------------------------------------------------
# Primitives
# -----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), vjp)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _const_like(b, a)
    if isinstance(b, Tensor):
        return _const_like(a, b), b
    return as_tensor(a), as_tensor(b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        if b.ndim == 2 and a.ndim > 2:
            k, n = b.shape
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), vjp)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose needs >= 2 axes, got {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(src),))


def flatten(a: Tensor, start: int = 1) -> Tensor:
    return reshape(a, a.shape[:start] + (-1,))


def slice_(a: Tensor, key) -> Tensor:
    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _result(a.data[key], (a,), vjp)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather ``a`` along ``axis`` with an integer index array of any shape."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim

    def vjp(g):
        lead = list(range(axis, axis + idx.ndim))
        gm = np.moveaxis(g, lead, list(range(idx.ndim)))
        acc = np.zeros(np.moveaxis(a.data, axis, 0).shape, dtype=g.dtype)
        np.add.at(acc, idx, gm)
        return (np.moveaxis(acc, 0, axis),)

    return _result(np.take(a.data, idx, axis=axis), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def mean_square(a: Tensor) -> Tensor:
    """mean(a**2) over every element."""
    n = a.data.size
    return _result(np.mean(a.data * a.data), (a,), lambda g: (g * (2.0 / n) * a.data,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split form avoids exp overflow for large |x|
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    return mul(a, sigmoid(a))


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, max-shifted per row."""
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _result(out, (a,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain = _pair(x, gain)
    bias = _const_like(bias, x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _result(out, (x, gain, bias), vjp)


def swiglu(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """(silu(x @ w_gate) * (x @ w_up)) @ w_down"""
    return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down)


# -----------------------------------------------------------------------------
# Optimizers
# -----------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new params and a new state."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = (p - update).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    return new_params, replace(state, step=t, m=new_m, v=new_v)


@dataclass
class SGDState:
    lr: float = 1e-3
    step: int = 0


def sgd_step(params, grads, state: SGDState):
    new_params = {k: (p - state.lr * grads[k]).astype(p.dtype, copy=False) for k, p in params.items()}
    return new_params, replace(state, step=state.step + 1)


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ||a-b|| / max(||a||, ||b||, floor).

    Elementwise ratios blow up on coordinates whose true gradient sits near
    the central-difference roundoff level (about eps*|f|/h), so the whole
    tensor is compared at once.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
