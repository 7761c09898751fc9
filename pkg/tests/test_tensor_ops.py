import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hanet import ops
from hanet.gradcheck import check_all, probe, relative_error, summarize
from hanet.ops import BatchNormState
from hanet.tensor import Parameter, ShapeError, Tensor, fresh_tape, no_grad

import oracles


def P(arr):
    return Parameter(np.asarray(arr, dtype=np.float64))


def grads_close(loss_fn, named, tol=1e-6):
    stats = summarize(check_all(loss_fn, named))
    assert stats["kinks"] == 0 and stats["max_rel_error"] < tol, stats


# -- Tensor ------------------------------------------------------------------

def test_tensor_rejects_rank_5_and_empty_dims():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 0, 2, 2)))


def test_tensor_copies_its_input():
    a = np.ones((1, 1, 2, 2))
    t = Tensor(a)
    a[0, 0, 0, 0] = 5
    assert t.data[0, 0, 0, 0] == 1


# -- conv2d ------------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = Tensor(rng.normal(size=(2, 1, 5, 6)))
    y = ops.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert np.array_equal(y.data, x.data)


def test_conv_zero_input_gives_bias():
    b = np.array([0.5, -2.0, 3.0])
    y = ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.ones((3, 2, 3, 3))), Tensor(b), padding=1)
    for c in range(3):
        assert np.all(y.data[0, c] == b[c])


def test_conv_random_3x3_matches_loop_oracle(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(4, 2, 3, 3))
    b = rng.normal(size=4)
    y = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1)
    assert np.max(np.abs(y.data - oracles.conv2d_loops(x, w, b, 1, 1))) < 1e-9


@pytest.mark.parametrize("stride,padding,R", [(1, 0, 3), (2, 1, 3), (2, 0, 1), (3, 2, 5)])
def test_conv_output_size_and_oracle(rng, stride, padding, R):
    x = rng.normal(size=(2, 3, 8, 7))
    w = rng.normal(size=(2, 3, R, R))
    b = rng.normal(size=2)
    y = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
    assert y.shape[2:] == ((8 + 2 * padding - R) // stride + 1, (7 + 2 * padding - R) // stride + 1)
    np.testing.assert_allclose(y.data, oracles.conv2d_loops(x, w, b, stride, padding), atol=1e-12)


def test_conv_rejects_channel_mismatch_and_even_kernel():
    with pytest.raises(ShapeError, match="channel"):
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((2, 2, 2, 2))))


def test_conv_gradients(rng):
    x, w, b = P(rng.uniform(-1, 1, (2, 2, 4, 4))), P(rng.uniform(-1, 1, (3, 2, 3, 3))), P(rng.uniform(-1, 1, 3))
    c = rng.normal(size=(2, 3, 2, 2))
    grads_close(lambda: (ops.conv2d(x, w, b, stride=2, padding=1) * Tensor(c)).sum(), [("x", x), ("w", w), ("b", b)])


# -- batchnorm ---------------------------------------------------------------

def test_bn_train_normalizes(rng):
    x = Tensor(rng.normal(3.0, 2.0, size=(4, 3, 5, 5)))
    st_ = BatchNormState(3)
    y = ops.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), st_, training=True)
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1, atol=1e-3)


def test_bn_constant_channel_maps_to_beta():
    y = ops.batchnorm2d(Tensor(np.full((2, 1, 3, 3), 7.0)), Tensor(np.ones(1)), Tensor(np.full(1, 5.0)),
                        BatchNormState(1), training=True)
    assert np.all(y.data == 5.0)


def test_bn_matches_statistics_oracle(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    g, b = rng.normal(size=3), rng.normal(size=3)
    y = ops.batchnorm2d(Tensor(x), Tensor(g), Tensor(b), BatchNormState(3), training=True)
    assert np.max(np.abs(y.data - oracles.batchnorm_stats(x, g, b, 1e-5))) < 1e-9


def test_bn_running_stats_update(rng):
    x = rng.normal(2.0, 3.0, size=(2, 2, 4, 4))
    s = BatchNormState(2)
    ops.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), s, training=True)
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(s.running_mean, 0.1 * mean, atol=1e-15)
    np.testing.assert_allclose(s.running_var, 0.9 + 0.1 * var, atol=1e-15)
    assert s.num_batches == 1


def test_bn_eval_uses_running_stats_and_warns_when_fresh(rng, caplog):
    x = rng.normal(size=(1, 2, 3, 3))
    with caplog.at_level(logging.WARNING):
        y = ops.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), BatchNormState(2), training=False)
    assert "running" in caplog.text.lower()
    np.testing.assert_allclose(y.data, x / np.sqrt(1 + 1e-5), atol=1e-15)


@pytest.mark.parametrize("training", [True, False])
def test_bn_gradients(rng, training):
    x, g, b = P(rng.uniform(-1, 1, (2, 2, 3, 3))), P(rng.uniform(0.5, 1.5, 2)), P(rng.uniform(-1, 1, 2))
    c = Tensor(rng.normal(size=(2, 2, 3, 3)))
    s = BatchNormState(2)
    s.running_mean[:] = [0.1, -0.2]
    s.running_var[:] = [1.5, 0.7]
    s.num_batches = 3
    snap = (s.running_mean.copy(), s.running_var.copy(), s.num_batches)

    def loss():
        s.running_mean, s.running_var, s.num_batches = snap[0].copy(), snap[1].copy(), snap[2]
        return (ops.batchnorm2d(x, g, b, s, training) * c).sum()

    grads_close(loss, [("x", x), ("gamma", g), ("beta", b)])


# -- adaptive pool -----------------------------------------------------------

def test_pool_k1_is_global_mean(rng):
    x = rng.normal(size=(2, 3, 5, 7))
    y = ops.adaptive_avg_pool(Tensor(x), 1)
    np.testing.assert_allclose(y.data[..., 0, 0], x.mean(axis=(2, 3)), atol=1e-14)


def test_pool_quadrants(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    y = ops.adaptive_avg_pool(Tensor(x), 2).data[0, 0]
    assert y[0, 1] == pytest.approx(x[0, 0, :2, 2:].mean(), abs=1e-15)
    assert y[1, 0] == pytest.approx(x[0, 0, 2:, :2].mean(), abs=1e-15)


def test_pool_5x5_k2_overlapping_windows():
    x = np.arange(25.0).reshape(1, 1, 5, 5)
    y = ops.adaptive_avg_pool(Tensor(x), 2).data[0, 0]
    # windows [0,3) and [2,5) on both axes
    assert y[0, 0] == pytest.approx(x[0, 0, 0:3, 0:3].mean())
    assert y[1, 1] == pytest.approx(x[0, 0, 2:5, 2:5].mean())
    np.testing.assert_allclose(y, oracles.adaptive_pool_loops(x, 2)[0, 0], atol=1e-14)


def test_pool_divisible_preserves_mean(rng):
    x = rng.normal(size=(1, 2, 12, 6))
    for K in (1, 2, 3, 6):
        y = ops.adaptive_avg_pool(Tensor(x), K)
        np.testing.assert_allclose(y.data.mean(axis=(2, 3)), x.mean(axis=(2, 3)), atol=1e-14)


def test_pool_rejects_large_k():
    with pytest.raises(ShapeError):
        ops.adaptive_avg_pool(Tensor(np.zeros((1, 1, 4, 6))), 5)


@pytest.mark.parametrize("K", [1, 2, 3])
def test_pool_gradients(rng, K):
    x = P(rng.uniform(-1, 1, (1, 2, 5, 4)))
    c = Tensor(rng.normal(size=(1, 2, K, K)))
    grads_close(lambda: (ops.adaptive_avg_pool(x, K) * c).sum(), [("x", x)])


# -- bilinear ----------------------------------------------------------------

def test_bilinear_constant_stays_constant():
    y = ops.bilinear_resize(Tensor(np.full((1, 2, 3, 5), 2.5)), 7, 4)
    np.testing.assert_allclose(y.data, 2.5, atol=1e-15)


def test_bilinear_same_size_is_bit_identical(rng):
    x = rng.normal(size=(2, 3, 6, 5))
    assert np.array_equal(ops.bilinear_resize(Tensor(x), 6, 5).data, x)


def test_bilinear_2x2_to_4x4():
    x = np.array([[[[0.0, 1.0], [2.0, 3.0]]]])
    y = ops.bilinear_resize(Tensor(x), 4, 4).data[0, 0]
    expected = np.array([
        [0.0, 0.25, 0.75, 1.0],
        [0.5, 0.75, 1.25, 1.5],
        [1.5, 1.75, 2.25, 2.5],
        [2.0, 2.25, 2.75, 3.0],
    ])
    np.testing.assert_allclose(y, expected, atol=1e-15)
    np.testing.assert_allclose(y, oracles.bilinear_pixels(x, 4, 4)[0, 0], atol=1e-15)


@pytest.mark.parametrize("shape", [(8, 8), (3, 5), (1, 4)])
def test_bilinear_gradients(rng, shape):
    x = P(rng.uniform(-1, 1, (1, 2, 2, 3)))
    c = Tensor(rng.normal(size=(1, 2) + shape))
    grads_close(lambda: (ops.bilinear_resize(x, *shape) * c).sum(), [("x", x)])


# -- fully connected ---------------------------------------------------------

def test_fc_identity_and_bias(rng):
    x = rng.normal(size=(3, 4))
    assert np.array_equal(ops.fully_connected(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    b = np.array([1.0, -2.0])
    y = ops.fully_connected(Tensor(x), Tensor(np.zeros((2, 4))), Tensor(b))
    assert np.all(y.data == b)


def test_fc_matches_loop_oracle(rng):
    x, w, b = rng.normal(size=(1, 6)), rng.normal(size=(4, 6)), rng.normal(size=4)
    y = ops.fully_connected(Tensor(x), Tensor(w), Tensor(b))
    assert np.max(np.abs(y.data - oracles.fc_loops(x, w, b))) < 1e-12


def test_fc_rejects_length_mismatch():
    with pytest.raises(ShapeError, match="features"):
        ops.fully_connected(Tensor(np.zeros((1, 5))), Tensor(np.zeros((2, 6))))


def test_fc_gradients(rng):
    x, w, b = P(rng.uniform(-1, 1, (3, 5))), P(rng.uniform(-1, 1, (2, 5))), P(rng.uniform(-1, 1, 2))
    c = Tensor(rng.normal(size=(3, 2)))
    grads_close(lambda: (ops.fully_connected(x, w, b) * c).sum(), [("x", x), ("w", w), ("b", b)])


# -- activations -------------------------------------------------------------

def test_activation_examples():
    assert ops.sigmoid(Tensor(0.0)).item() == 0.5
    r = ops.relu(Tensor([-3.0, 3.0])).data
    assert list(r) == [0.0, 3.0]
    with pytest.raises(ValueError):
        ops.activation(Tensor(1.0), "tanh")


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False, min_value=-1e308, max_value=1e308))
def test_sigmoid_open_interval_relu_nonneg(v):
    s = ops.sigmoid(Tensor([v])).data[0]
    assert 0.0 < s < 1.0
    assert ops.relu(Tensor([v])).data[0] >= 0.0


def test_sigmoid_gradient_formula_and_fd(rng):
    z = rng.uniform(-4, 4, 20)
    x = P(z)
    with fresh_tape():
        ops.sigmoid(x).sum().backward()
    s = 1 / (1 + np.exp(-z))
    np.testing.assert_allclose(x.grad, s * (1 - s), atol=1e-15)
    assert max(s_.rel_error for s_ in check_all(lambda: ops.sigmoid(x).sum(), [("x", x)])) < 1e-7


def test_relu_gradients(rng):
    x = P(rng.uniform(-1, 1, (1, 1, 4, 4)))
    c = Tensor(rng.normal(size=(1, 1, 4, 4)))
    grads_close(lambda: (ops.relu(x) * c).sum(), [("x", x)])


# -- concat / slice ----------------------------------------------------------

def test_concat_shape_and_roundtrip(rng):
    a = Tensor(rng.normal(size=(1, 2, 4, 4)))
    assert ops.concat_channels(a, Tensor(np.zeros((1, 3, 4, 4)))).shape == (1, 5, 4, 4)
    back = ops.slice_channels(ops.concat_channels(a, Tensor(np.zeros((1, 3, 4, 4)))), 0, 2)
    assert np.array_equal(back.data, a.data)


def test_concat_sum_grads_are_ones(rng):
    a, b = P(rng.normal(size=(1, 2, 3, 3))), P(rng.normal(size=(1, 3, 3, 3)))
    with fresh_tape():
        ops.concat_channels(a, b).sum().backward()
    assert np.array_equal(a.grad, np.ones(a.shape)) and np.array_equal(b.grad, np.ones(b.shape))


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(ShapeError):
        ops.concat_channels(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 5))))


# -- elementwise -------------------------------------------------------------

def test_elementwise_identities(rng):
    a = Tensor(rng.normal(size=(2, 3, 4, 4)))
    assert np.array_equal(ops.elementwise(a, Tensor(np.zeros(a.shape)), "add").data, a.data)
    assert np.array_equal(ops.elementwise(a, Tensor(np.ones(a.shape)), "mul").data, a.data)


def test_per_channel_scale(rng):
    a = rng.normal(size=(1, 4, 2, 2))
    s = np.array([1.0, -2.0, 0.5, 3.0]).reshape(1, 4, 1, 1)
    y = ops.mul(Tensor(a), Tensor(s)).data
    for c in range(4):
        assert np.array_equal(y[0, c], a[0, c] * s[0, c, 0, 0])


@pytest.mark.parametrize("bshape", [(1, 4, 1, 1), (1, 1, 3, 3), (2, 4, 3, 3)])
def test_broadcast_mul_add_gradients(rng, bshape):
    a = P(rng.uniform(-1, 1, (2, 4, 3, 3)))
    b = P(rng.uniform(-1, 1, bshape))
    grads_close(lambda: ops.add(ops.mul(a, b), b).sum(), [("a", a), ("b", b)])


def test_broadcast_grad_is_channel_sum(rng):
    a = P(rng.normal(size=(1, 4, 2, 2)))
    b = P(rng.normal(size=(1, 4, 1, 1)))
    with fresh_tape():
        ops.mul(a, b).sum().backward()
    np.testing.assert_allclose(b.grad[0, :, 0, 0], a.data.sum(axis=(0, 2, 3)), atol=1e-14)


def test_elementwise_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.zeros((1, 4, 2, 2))), Tensor(np.zeros((1, 3, 1, 1))))
    with pytest.raises(ValueError):
        ops.elementwise(Tensor(1.0), Tensor(1.0), "sub")


# -- max pool ----------------------------------------------------------------

def test_max_pool_values_and_gradients(rng):
    x = rng.normal(size=(1, 2, 4, 6))
    y = ops.max_pool2d(Tensor(x)).data
    for i in range(2):
        for j in range(3):
            assert y[0, 1, i, j] == x[0, 1, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
    p = P(x)
    c = Tensor(rng.normal(size=y.shape))
    grads_close(lambda: (ops.max_pool2d(p) * c).sum(), [("x", p)])


# -- backward semantics ------------------------------------------------------

def test_loss_is_parameter():
    p = P(3.0)
    p.backward()
    assert p.grad == 1.0


def test_linear_map_gradient(rng):
    p = P(rng.normal(size=(1, 2, 3, 3)))
    c = rng.normal(size=(1, 2, 3, 3))
    with fresh_tape():
        (p * Tensor(c)).sum().backward()
    assert np.array_equal(p.grad, c)


def test_repeated_backward_accumulates(rng):
    p = P(rng.normal(size=(1, 1, 2, 2)))
    with fresh_tape():
        loss = (p * Tensor(np.full((1, 1, 2, 2), 2.0))).sum()
        loss.backward()
        loss.backward()
    assert np.array_equal(p.grad, np.full((1, 1, 2, 2), 4.0))


def test_non_scalar_loss_rejected():
    p = P(np.ones((1, 1, 2, 2)))
    with fresh_tape():
        y = ops.relu(p)
        with pytest.raises(ShapeError, match="scalar"):
            y.backward()


def test_tape_replays_in_reverse_order():
    p = P(np.ones((1, 1, 2, 2)))
    with fresh_tape() as tape:
        loss = ops.sigmoid(ops.relu(p * Tensor(np.full((1, 1, 2, 2), 2.0)))).sum()
        recorded = [e.op for e in tape.entries]
        visited = tape.backward(loss)
    assert recorded == ["mul", "relu", "sigmoid", "sum"]
    assert visited == recorded[::-1]


def test_no_grad_records_nothing():
    p = P(np.ones(3))
    with fresh_tape() as tape, no_grad():
        ops.relu(p)
    assert len(tape) == 0


def test_probe_flags_relu_kink():
    x = P([1e-6, 0.5])
    fn = lambda: ops.relu(x).sum()  # noqa: E731
    assert probe(fn, x, (0,)) == (pytest.approx(0.55), True)
    assert probe(fn, x, (1,)) == (pytest.approx(1.0), False)


def test_relative_error_floor():
    assert relative_error(1e-12, -1e-12) == pytest.approx(2e-12 / 1e-5)
    assert relative_error(2.0, 1.0) == 0.5


def test_tape_determinism(rng):
    w0 = rng.normal(size=(3, 2, 3, 3))
    x0 = rng.normal(size=(1, 2, 5, 5))

    def run():
        w = P(w0)
        with fresh_tape():
            y = ops.sigmoid(ops.conv2d(Tensor(x0), w, padding=1)).sum()
            y.backward()
        return y.data.copy(), w.grad

    (a, ga), (b, gb) = run(), run()
    assert np.array_equal(a, b) and np.array_equal(ga, gb)
