import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fedpatch import numerics as nx
from oracles import adam_scalar, layer_norm, softmax_row, swiglu


def grad_check(fn, *inputs, tol=1e-6):
    """Tape gradient of sum(fn(*inputs) * probe) vs central differences, per input."""
    rng = np.random.default_rng(0)
    with nx.GradientTape() as tape:
        ts = [nx.Tensor(x) for x in inputs]
        tape.watch(*ts)
        out = fn(*ts)
        probe = rng.normal(size=out.shape)
        loss = nx.sum_(nx.mul(out, probe))
    grads = tape.gradient(loss, ts)
    for i, x in enumerate(inputs):
        def f(v, i=i):
            args = [nx.Tensor(a) for a in inputs]
            args[i] = nx.Tensor(v)
            return float((fn(*args).data * probe).sum())
        fd = nx.finite_difference_grad(f, x)
        assert nx.max_relative_error(grads[i], fd) < tol


OPS = {
    "add": (lambda a, b: nx.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: nx.sub(a, b), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: nx.mul(a, b), [(2, 3), (2, 3)]),
    "div": (lambda a, b: nx.div(a, nx.add(nx.mul(b, b), 1.0)), [(2, 3), (2, 3)]),
    "matmul": (lambda a, b: nx.matmul(a, b), [(2, 3, 4), (4, 5)]),
    "transpose": (lambda a: nx.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    "reshape": (lambda a: nx.reshape(a, (6, 2)), [(3, 4)]),
    "take": (lambda a: nx.take(a, np.array([[0, 1], [1, 2]]), axis=-1), [(3, 4)]),
    "slice": (lambda a: nx.slice_(a, (slice(None), slice(1, 3))), [(3, 4)]),
    "concat": (lambda a, b: nx.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    "sum": (lambda a: nx.sum_(a, axis=1, keepdims=True), [(3, 4)]),
    "mean": (lambda a: nx.mean(a, axis=0), [(3, 4)]),
    "sigmoid": (lambda a: nx.sigmoid(a), [(3, 4)]),
    "silu": (lambda a: nx.silu(a), [(3, 4)]),
    "softmax": (lambda a: nx.softmax_rows(a), [(3, 5)]),
    "layer_norm": (lambda a, g, b: nx.layer_norm(a, g, b), [(3, 6), (6,), (6,)]),
    "swiglu": (lambda x, a, b, c: nx.swiglu(x, a, b, c), [(3, 4), (4, 5), (4, 5), (5, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    grad_check(fn, *[rng.normal(size=s) for s in shapes])


def test_gradient_accumulates_over_reuse():
    x = np.array([1.5, -2.0])
    with nx.GradientTape() as tape:
        t = nx.Tensor(x)
        tape.watch(t)
        y = nx.sum_(nx.mul(t, t))
    (g,) = tape.gradient(y, [t])
    np.testing.assert_allclose(g, 2 * x)


def test_unwatched_source_gets_zero_gradient():
    with nx.GradientTape() as tape:
        a, b = nx.Tensor(np.ones(3)), nx.Tensor(np.ones(3))
        tape.watch(a)
        y = nx.sum_(a)
    ga, gb = tape.gradient(y, [a, b])
    np.testing.assert_array_equal(ga, np.ones(3))
    np.testing.assert_array_equal(gb, np.zeros(3))


def test_matmul_shape_mismatch_raises():
    with pytest.raises(nx.ShapeError):
        nx.matmul(nx.Tensor(np.ones((2, 3))), nx.Tensor(np.ones((4, 2))))


@given(arrays(np.float64, (4, 6), elements=st.floats(-300, 300)))
def test_softmax_rows_sum_to_one_and_match_loop(x):
    s = nx.softmax_rows(nx.Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    for row, ref in zip(s, x):
        np.testing.assert_allclose(row, softmax_row(list(ref)), atol=1e-12)


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-1e3, 1e3))
def test_softmax_is_shift_invariant(x, c):
    a = nx.softmax_rows(nx.Tensor(x)).data
    b = nx.softmax_rows(nx.Tensor(x + c)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_softmax_large_logits_stay_finite():
    s = nx.softmax_rows(nx.Tensor(np.array([[1e4, 0.0, -1e4]]))).data
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s, [[1.0, 0.0, 0.0]])


def test_layer_norm_and_swiglu_match_loops(rng):
    for _ in range(20):
        x = rng.normal(size=(3, 6))
        g, b = rng.normal(size=6), rng.normal(size=6)
        got = nx.layer_norm(nx.Tensor(x), nx.Tensor(g), nx.Tensor(b)).data
        np.testing.assert_allclose(got, layer_norm(x.tolist(), g.tolist(), b.tolist()), atol=1e-12)
        wg, wu, wd = rng.normal(size=(6, 4)), rng.normal(size=(6, 4)), rng.normal(size=(4, 6))
        got = nx.swiglu(nx.Tensor(x), nx.Tensor(wg), nx.Tensor(wu), nx.Tensor(wd)).data
        np.testing.assert_allclose(got, swiglu(x.tolist(), wg.tolist(), wu.tolist(), wd.tolist()), atol=1e-12)


def test_layer_norm_on_constant_row_is_bias():
    out = nx.layer_norm(nx.Tensor(np.full((1, 4), 3.0)), nx.Tensor(np.ones(4)), nx.Tensor(np.arange(4.0))).data
    np.testing.assert_allclose(out, [[0, 1, 2, 3]])


def test_adam_matches_scalar_oracle():
    state = nx.AdamState(lr=0.1, beta1=0.9, beta2=0.99, eps=1e-3)
    params = {"w": np.array([2.0])}
    grads = [0.5, -1.0, 0.25, 3.0]
    for g in grads:
        params, state = nx.adam_step(params, {"w": np.array([g])}, state)
    assert state.step == 4
    assert params["w"][0] == pytest.approx(adam_scalar(2.0, grads, 0.1, 0.9, 0.99, 1e-3), abs=1e-14)


def test_adam_does_not_mutate_inputs():
    p = {"w": np.ones(3)}
    g = {"w": np.ones(3)}
    st0 = nx.AdamState()
    nx.adam_step(p, g, st0)
    np.testing.assert_array_equal(p["w"], np.ones(3))
    assert st0.step == 0 and not st0.m


def test_sgd_step():
    p, s = nx.sgd_step({"w": np.array([1.0, 2.0])}, {"w": np.array([10.0, -10.0])}, nx.SGDState(lr=0.1))
    np.testing.assert_allclose(p["w"], [0.0, 3.0])
    assert s.step == 1


def test_finite_difference_on_quadratic():
    a = np.array([[2.0, 0.5], [0.5, 1.0]])
    x = np.array([0.3, -0.7])
    fd = nx.finite_difference_grad(lambda v: float(v @ a @ v), x)
    np.testing.assert_allclose(fd, 2 * a @ x, atol=1e-8)


def test_max_relative_error_normwise():
    assert nx.max_relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert nx.max_relative_error(np.array([1.0, 0.0]), np.array([1.0, 1e-9])) < 1e-8
    assert nx.max_relative_error(np.array([1.0]), np.array([-1.0])) == pytest.approx(2.0)
