"""Binary checkpoints and wire payloads.

Checkpoint layout::

    b"FPCK" | u16 format version | u32 header length | header JSON (utf-8)
    | float parameters in declared order, float32 little-endian
    | for each quantized matrix: int8 codes, then float32 LE block scales

Wire payloads carry trainable parameters only, as bare float32 LE values in
the model's trainable order. Both sides know the shapes, so there is no header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import FormatError
from .model import ForecastModel, ModelConfig, QuantizedTensor

MAGIC = b"FPCK"
FORMAT_VERSION = 1
WIRE_DTYPE = np.dtype("<f4")


def encode_state(state: Mapping[str, np.ndarray], names: Sequence[str]) -> bytes:
    return b"".join(np.ascontiguousarray(state[k], dtype=WIRE_DTYPE).tobytes() for k in names)


def decode_state(payload: bytes, shapes: Mapping[str, tuple[int, ...]], dtype=np.float32) -> dict[str, np.ndarray]:
    expected = sum(int(np.prod(s)) for s in shapes.values()) * WIRE_DTYPE.itemsize
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, expected {expected}")
    out, offset = {}, 0
    for k, shape in shapes.items():
        n = int(np.prod(shape))
        out[k] = np.frombuffer(payload, WIRE_DTYPE, count=n, offset=offset).reshape(shape).astype(dtype)
        offset += n * WIRE_DTYPE.itemsize
    return out


def payload_size(shapes: Mapping[str, tuple[int, ...]]) -> int:
    return sum(int(np.prod(s)) for s in shapes.values()) * WIRE_DTYPE.itemsize


def to_bytes(model: ForecastModel, meta: Mapping | None = None) -> bytes:
    header = {
        "config": model.cfg.to_dict(),
        "peft": model.peft,
        "trainable": list(model.trainable),
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
        "quantized": [[k, list(q.shape), q.block] for k, q in model.quantized.items()],
        "meta": dict(meta or {}),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(head)), head]
    parts.append(encode_state(model.params, list(model.params)))
    for q in model.quantized.values():
        parts.append(np.ascontiguousarray(q.codes, dtype=np.int8).tobytes())
        parts.append(np.ascontiguousarray(q.scales, dtype=WIRE_DTYPE).tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> tuple[ForecastModel, dict]:
    try:
        return _parse(blob)
    except (ValueError, KeyError, TypeError, struct.error) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"corrupt checkpoint: {exc}") from None


def _parse(blob: bytes) -> tuple[ForecastModel, dict]:
    if blob[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = 4 + struct.calcsize("<HI")
    header = json.loads(blob[start:start + hlen].decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    offset = start + hlen
    shapes = {k: tuple(s) for k, s in header["params"]}
    n = payload_size(shapes)
    params = decode_state(blob[offset:offset + n], shapes, dtype=cfg.np_dtype)
    offset += n
    quant = {}
    for k, shape, block in header["quantized"]:
        size = int(np.prod(shape))
        n_blocks = -(-size // block)
        codes = np.frombuffer(blob, np.int8, count=size, offset=offset).copy()
        offset += size
        scales = np.frombuffer(blob, WIRE_DTYPE, count=n_blocks, offset=offset).astype(np.float32)
        offset += n_blocks * WIRE_DTYPE.itemsize
        quant[k] = QuantizedTensor(codes, scales, tuple(shape), block)
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes in checkpoint")
    model = ForecastModel(cfg, params, quant, header["trainable"], header["peft"])
    return model, header["meta"]


def save(model: ForecastModel, path, meta: Mapping | None = None) -> int:
    blob = to_bytes(model, meta)
    Path(path).write_bytes(blob)
    return len(blob)


def load(path) -> tuple[ForecastModel, dict]:
    return from_bytes(Path(path).read_bytes())
