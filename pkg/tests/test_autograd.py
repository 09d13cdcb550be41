import numpy as np
import pytest

from sintad.autograd import (BatchNormState, NonFiniteError, Parameter, ShapeError, Tape, TapeError, Tensor,
                             adam_step, ops, zero_grad)


def conv_oracle(x, k, b):
    """Direct nested-loop 3x3 cross-correlation with zero padding."""
    c_in, h, w = x.shape
    c_out = k.shape[0]
    xp = np.zeros((c_in, h + 2, w + 2))
    xp[:, 1:-1, 1:-1] = x
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                acc = b[o]
                for c in range(c_in):
                    for di in range(3):
                        for dj in range(3):
                            acc += k[o, c, di, dj] * xp[c, i + di, j + dj]
                out[o, i, j] = acc
    return out


def pool_oracle(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2), dtype=x.dtype)
    for ch in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                out[ch, i, j] = max(x[ch, 2 * i, 2 * j], x[ch, 2 * i, 2 * j + 1],
                                    x[ch, 2 * i + 1, 2 * j], x[ch, 2 * i + 1, 2 * j + 1])
    return out


def numeric_grad(f, arr, h=1e-3):
    """Central differences of scalar ``f()`` w.r.t. every element of ``arr`` (in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def analytic(loss_fn, *tensors):
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [t.grad.astype(np.float64) for t in tensors]


def check_grads(loss_fn, tensors, rtol=1e-3, h=1e-3, floor=1e-4):
    """Compare tape gradients with central differences, in float64."""
    grads = analytic(loss_fn, *tensors)
    for t, g in zip(tensors, grads):
        num = numeric_grad(lambda: float(loss_fn().data), t.data, h)
        scale = np.maximum(np.abs(num), np.abs(g))
        big = scale > floor
        rel = np.abs(num - g)[big] / scale[big]
        assert rel.size == 0 or rel.max() < rtol, f"max rel err {rel.max()}"
        assert np.allclose(g[~big], num[~big], atol=10 * floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def f64(rng, *shape, requires_grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


# -- tensor invariants -------------------------------------------------------

def test_tensor_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


def test_tensor_defaults_to_float32():
    t = Tensor([[1, 2], [3, 4]])
    assert t.dtype == np.float32 and t.size == 4 and t.shape == (2, 2)


def test_parameter_state_matches_shape():
    p = Parameter(np.ones((3, 2), np.float32))
    assert p.m.shape == p.v.shape == p.grad.shape == p.shape


# -- conv2d ------------------------------------------------------------------

def test_conv_zero_input_gives_bias():
    x = Tensor(np.zeros((2, 5, 5)))
    k = Tensor(np.random.default_rng(0).standard_normal((3, 2, 3, 3)))
    b = Tensor(np.array([1.0, -2.0, 0.5]))
    out = ops.conv2d(x, k, b).data
    assert out.shape == (3, 5, 5)
    for o in range(3):
        assert np.all(out[o] == b.data[o])


def test_conv_identity_kernel(rng):
    x = Tensor(rng.standard_normal((1, 6, 7)).astype(np.float32))
    k = np.zeros((1, 1, 3, 3), np.float32)
    k[0, 0, 1, 1] = 1
    out = ops.conv2d(x, Tensor(k), Tensor(np.zeros(1, np.float32)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_matches_nested_loop_oracle(rng):
    x = rng.standard_normal((1, 5, 5)).astype(np.float32)
    k = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    out = ops.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    np.testing.assert_allclose(out, conv_oracle(x, k, b), atol=1e-5)


def test_conv_batched_oracle_multichannel(rng):
    x = rng.standard_normal((2, 3, 4, 6))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = ops.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    for n in range(2):
        np.testing.assert_allclose(out[n], conv_oracle(x[n], k, b), atol=1e-10)


def test_conv_shape_errors():
    x = Tensor(np.zeros((2, 4, 4)))
    with pytest.raises(ShapeError, match="C_in=2.*C_in=3"):
        ops.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ShapeError, match="3x3"):
        ops.conv2d(x, Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros(1)))
    with pytest.raises(ShapeError, match="bias"):
        ops.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros(2)))


def test_conv_gradients(rng):
    x, k, b = f64(rng, 2, 2, 4, 5), f64(rng, 3, 2, 3, 3), f64(rng, 3)
    r = Tensor(rng.standard_normal((2, 3, 4, 5)))
    check_grads(lambda: ops.sum(ops.mul(ops.conv2d(x, k, b), r)), [x, k, b])


# -- maxpool / upsample --------------------------------------------------------

def test_maxpool_constant_and_block():
    out = ops.maxpool2d(Tensor(np.full((2, 4, 6), 3.5))).data
    assert out.shape == (2, 2, 3) and np.all(out == 3.5)
    out = ops.maxpool2d(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))).data
    np.testing.assert_array_equal(out, [[[4.0]]])


def test_maxpool_matches_oracle_exactly(rng):
    x = rng.standard_normal((3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(ops.maxpool2d(Tensor(x)).data, pool_oracle(x))


def test_maxpool_odd_size_errors():
    with pytest.raises(ShapeError):
        ops.maxpool2d(Tensor(np.zeros((1, 3, 4))))


def test_maxpool_tie_routes_to_first_element():
    x = Tensor(np.full((1, 1, 2, 2), 1.0), requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.maxpool2d(x))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_maxpool_gradients(rng):
    x = f64(rng, 2, 2, 4, 4)
    r = Tensor(rng.standard_normal((2, 2, 2, 2)))
    check_grads(lambda: ops.sum(ops.mul(ops.maxpool2d(x), r)), [x])


def test_upsample_replication_and_roundtrip():
    out = ops.upsample2d(Tensor(np.array([[[5.0]]]))).data
    np.testing.assert_array_equal(out, np.full((1, 2, 2), 5.0))
    c = Tensor(np.full((2, 6, 4), -1.25))
    np.testing.assert_array_equal(ops.upsample2d(ops.maxpool2d(c)).data, c.data)


def test_upsample_gradients(rng):
    x = f64(rng, 1, 2, 3, 3)
    r = Tensor(rng.standard_normal((1, 2, 6, 6)))
    check_grads(lambda: ops.sum(ops.mul(ops.upsample2d(x), r)), [x])


# -- dense -------------------------------------------------------------------

def test_dense_identity_and_zero_input(rng):
    x = Tensor(rng.standard_normal(4))
    out = ops.dense(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x.data)
    b = Tensor(rng.standard_normal(3))
    out = ops.dense(Tensor(np.zeros(5)), Tensor(rng.standard_normal((3, 5))), b)
    np.testing.assert_array_equal(out.data, b.data)


def test_dense_dimension_mismatch():
    with pytest.raises(ShapeError):
        ops.dense(Tensor(np.zeros(4)), Tensor(np.zeros((3, 5))), Tensor(np.zeros(3)))


def test_dense_gradients(rng):
    x, w, b = f64(rng, 4), f64(rng, 3, 4), f64(rng, 3)
    r = Tensor(rng.standard_normal(3))
    check_grads(lambda: ops.sum(ops.mul(ops.dense(x, w, b), r)), [x, w, b])


# -- batchnorm ---------------------------------------------------------------

def test_batchnorm_train_normalises(rng):
    x = Tensor((rng.standard_normal((8, 3, 4, 4)) * [[[[2.0]], [[0.5]], [[7.0]]]] + 3).astype(np.float32))
    c = 3
    st = BatchNormState()
    y = ops.batchnorm(x, Tensor(np.ones(c)), Tensor(np.zeros(c)), st, "train").data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)
    # running state moved 10% of the way from (0, 1) towards the batch statistics
    np.testing.assert_allclose(st.mean, 0.1 * x.data.mean(axis=(0, 2, 3)), rtol=1e-4)


def test_batchnorm_infer_identity_with_unit_stats(rng):
    x = Tensor(rng.standard_normal((4, 2, 3, 3)).astype(np.float32))
    st = BatchNormState.initialized(2)
    y = ops.batchnorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), st, "infer").data
    np.testing.assert_allclose(y, x.data / np.sqrt(1 + 1e-5), rtol=1e-6)
    np.testing.assert_allclose(y, x.data, atol=1e-4)


def test_batchnorm_infer_requires_state():
    with pytest.raises(RuntimeError):
        ops.batchnorm(Tensor(np.zeros((2, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)), BatchNormState(), "infer")


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_batchnorm_gradients(rng, mode):
    x, g, b = f64(rng, 4, 3, 2, 2), f64(rng, 3), f64(rng, 3)
    r = Tensor(rng.standard_normal((4, 3, 2, 2)))
    st = BatchNormState.initialized(3, np.float64)
    st.mean, st.var = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
    snapshot = (st.mean.copy(), st.var.copy())

    def loss():
        st.mean, st.var = snapshot[0].copy(), snapshot[1].copy()
        return ops.sum(ops.mul(ops.batchnorm(x, g, b, st, mode), r))

    check_grads(loss, [x, g, b])


# -- dropout -----------------------------------------------------------------

def test_dropout_identity_cases(rng):
    x = Tensor(rng.standard_normal((10, 10)))
    assert ops.dropout(x, 0.0, "train", rng) is x
    assert ops.dropout(x, 0.7, "infer") is x


def test_dropout_rate_bounds():
    with pytest.raises(ValueError):
        ops.dropout(Tensor([1.0]), 1.0, "train", np.random.default_rng(0))


def test_dropout_survivor_fraction_and_scaling():
    x = Tensor(np.ones(100_000, np.float32))
    y = ops.dropout(x, 0.5, "train", np.random.default_rng(7)).data
    frac = np.mean(y != 0)
    assert 0.49 <= frac <= 0.51
    assert np.all((y == 0) | (y == 2.0))


def test_dropout_deterministic_given_seed():
    x = Tensor(np.ones((50, 50)))
    a = ops.dropout(x, 0.3, "train", np.random.default_rng(3)).data
    b = ops.dropout(x, 0.3, "train", np.random.default_rng(3)).data
    np.testing.assert_array_equal(a, b)


# -- losses --------------------------------------------------------------------

def test_relu_and_losses():
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    X = Tensor(np.arange(6.0).reshape(2, 3))
    assert float(ops.mse_loss(X, X).data) == 0
    assert float(ops.mse_loss(Tensor(np.eye(2)), Tensor(np.zeros((2, 2)))).data) == pytest.approx(np.sqrt(2))


def test_sse_gradient_is_twice_difference(rng):
    a, t = f64(rng, 3, 4), Tensor(rng.standard_normal((3, 4)))
    (g,) = analytic(lambda: ops.sse_loss(a, t), a)
    np.testing.assert_allclose(g, 2 * (a.data - t.data))


def test_mse_loss_gradient(rng):
    a, t = f64(rng, 3, 3), Tensor(rng.standard_normal((3, 3)))
    check_grads(lambda: ops.mse_loss(a, t), [a])


# -- tape --------------------------------------------------------------------

def test_backward_unused_parameter_gets_zero_gradient():
    used, unused = Parameter([1.0, 2.0]), Parameter([3.0])
    with Tape() as tape:
        y = ops.sum(ops.mul(used, used))
    tape.backward(y)
    np.testing.assert_array_equal(unused.grad, [0.0])
    np.testing.assert_array_equal(used.grad, [2.0, 4.0])


def test_backward_twice_is_an_error():
    w = Parameter([1.0])
    with Tape() as tape:
        y = ops.sum(ops.mul(w, w))
    tape.backward(y)
    with pytest.raises(TapeError):
        tape.backward(y)


def test_backward_needs_scalar():
    w = Parameter([1.0, 2.0])
    with Tape() as tape:
        y = ops.mul(w, w)
    with pytest.raises(TapeError, match="scalar"):
        tape.backward(y)


def test_backward_reverse_order_accumulates_fanout():
    w = Parameter([3.0])
    with Tape() as tape:
        a = ops.mul(w, w)            # w^2
        b = ops.add(a, ops.scale(a, 2.0))   # 3 w^2
        y = ops.sum(ops.mul(b, w))   # 3 w^3
    tape.backward(y)
    np.testing.assert_allclose(w.grad, [81.0])


def test_no_recording_outside_tape():
    w = Parameter([1.0])
    y = ops.mul(w, w)
    assert not y.requires_grad


def test_two_layer_net_matches_finite_differences(rng):
    # analytic gradients in float32 as in training; the oracle re-evaluates
    # the same network on float64 copies so rounding does not swamp the step
    arrays = {
        "w1": rng.standard_normal((5, 6)) * 0.5, "b1": rng.standard_normal(5) * 0.1,
        "w2": rng.standard_normal((2, 5)) * 0.5, "b2": rng.standard_normal(2) * 0.1,
    }
    x64, t64 = rng.standard_normal((4, 6)), rng.standard_normal((4, 2))

    def loss(p, x, t):
        h = ops.relu(ops.dense(Tensor(x), p["w1"], p["b1"]))
        return ops.sse_loss(ops.dense(h, p["w2"], p["b2"]), Tensor(t))

    params = {k: Parameter(v.astype(np.float32)) for k, v in arrays.items()}
    with Tape() as tape:
        y = loss(params, x64.astype(np.float32), t64.astype(np.float32))
    tape.backward(y)
    twin = {k: Tensor(v.data.astype(np.float64)) for k, v in params.items()}
    for k, p in params.items():
        num = numeric_grad(lambda: float(loss(twin, x64.astype(np.float32).astype(np.float64),
                                              t64.astype(np.float32).astype(np.float64)).data),
                           twin[k].data, 1e-3)
        big = np.abs(p.grad) > 1e-4
        rel = np.abs(num - p.grad)[big] / np.abs(p.grad)[big]
        assert rel.max() < 1e-2, k


# -- adam --------------------------------------------------------------------

def test_adam_zero_gradient_keeps_parameters():
    p = Parameter(np.array([1.0, -2.0], np.float32))
    before = p.data.copy()
    adam_step([p], lr=0.1)
    np.testing.assert_array_equal(p.data, before)


def test_adam_descends_on_square():
    w = Parameter(np.array([1.0], np.float32))
    with Tape() as tape:
        y = ops.sum(ops.mul(w, w))
    tape.backward(y)
    adam_step([w], lr=0.1)
    assert w.data[0] < 1.0


def test_adam_converges_on_quadratic():
    w = Parameter(np.array([3.0, -2.0], np.float32))
    scale = Tensor(np.array([1.0, 4.0], np.float32))

    def f():
        return ops.sum(ops.mul(ops.mul(w, w), scale))

    initial = float(f().data)
    for _ in range(200):
        zero_grad([w])
        with Tape() as tape:
            y = f()
        tape.backward(y)
        adam_step([w], lr=0.1)
    assert float(f().data) < 1e-3 * initial


def test_adam_deterministic():
    runs = []
    for _ in range(2):
        w = Parameter(np.array([0.3, 0.7], np.float32))
        for _ in range(5):
            zero_grad([w])
            with Tape() as tape:
                y = ops.sum(ops.mul(w, w))
            tape.backward(y)
            adam_step([w], lr=0.01)
        runs.append(w.data.copy())
    np.testing.assert_array_equal(runs[0], runs[1])
