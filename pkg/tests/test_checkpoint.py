import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import tiny_config
from fedpatch import checkpoint
from fedpatch.errors import FormatError
from fedpatch.model import ForecastModel, dequantize


@pytest.mark.parametrize("peft", [False, True])
def test_model_round_trip_is_exact(tmp_path, peft):
    m = ForecastModel.init(tiny_config(dtype="float32", n_channels=3), 0).for_forecasting()
    if peft:
        m = m.to_peft(1)
    n = checkpoint.save(m, tmp_path / "m.fpck", {"cluster": 2})
    back, meta = checkpoint.load(tmp_path / "m.fpck")
    assert n == (tmp_path / "m.fpck").stat().st_size
    assert meta == {"cluster": 2}
    assert back.cfg == m.cfg and back.trainable == m.trainable and back.peft == peft
    assert list(back.params) == list(m.params)
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k])
    for k, q in m.quantized.items():
        np.testing.assert_array_equal(dequantize(back.quantized[k]), dequantize(q))
    x = np.random.default_rng(0).normal(size=(2, 16))
    np.testing.assert_array_equal(back.predict(x, np.array([0, 2])), m.predict(x, np.array([0, 2])))


def test_corrupt_blobs_are_rejected():
    blob = checkpoint.to_bytes(ForecastModel.init(tiny_config(dtype="float32"), 0).for_forecasting())
    with pytest.raises(FormatError):
        checkpoint.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        checkpoint.from_bytes(blob + b"\0")
    with pytest.raises(FormatError):
        checkpoint.from_bytes(blob[:-7])
    with pytest.raises(FormatError):
        checkpoint.from_bytes(blob[:4] + b"\x09\x00" + blob[6:])


@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_wire_encoding_round_trip(a):
    state = {"a": a, "b": a[:1] * 2}
    payload = checkpoint.encode_state(state, ["a", "b"])
    assert len(payload) == checkpoint.payload_size({"a": a.shape, "b": (1, a.shape[1])}) == 4 * (a.size + a.shape[1])
    back = checkpoint.decode_state(payload, {"a": a.shape, "b": (1, a.shape[1])})
    np.testing.assert_array_equal(back["a"], a)
    np.testing.assert_array_equal(back["b"], a[:1] * 2)


def test_wire_format_is_little_endian_float32():
    payload = checkpoint.encode_state({"w": np.array([1.0])}, ["w"])
    assert payload == b"\x00\x00\x80\x3f"


def test_decode_rejects_wrong_size():
    with pytest.raises(FormatError):
        checkpoint.decode_state(b"\0" * 12, {"w": (2, 2)})
