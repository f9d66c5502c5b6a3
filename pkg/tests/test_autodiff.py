import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attnprune.autodiff import SGD, Tape, Tensor, backward, ops, sgd_momentum_step
from attnprune.errors import DimensionError, InvalidInputError, InvalidStateError

from gradcheck import check

TOL = 1e-4
rng = np.random.default_rng(0)


def away_from_kinks(shape, rng, margin=0.05, ceiling=None):
    x = rng.normal(size=shape)
    x[np.abs(x) < margin] += 2 * margin
    if ceiling is not None:
        near = np.abs(x - ceiling) < margin
        x[near] += 2 * margin
    return x


def loop_conv2d(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for f in range(o):
            for y in range(ho):
                for z in range(wo):
                    patch = xp[i, :, y * stride : y * stride + kh, z * stride : z * stride + kw]
                    out[i, f, y, z] = (patch * w[f]).sum() + (b[f] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_loop_oracle(stride, pad):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, loop_conv2d(x, w, b, stride, pad), rtol=1e-10, atol=1e-10)


def test_depthwise_matches_loop_oracle():
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(3, 1, 3, 3))
    got = ops.depthwise_conv2d(Tensor(x), Tensor(w), 1, 1).data
    for c in range(3):
        ref = loop_conv2d(x[:, c : c + 1], w[c : c + 1], None, 1, 1)
        np.testing.assert_allclose(got[:, c : c + 1], ref, rtol=1e-10, atol=1e-10)


def test_max_pool_matches_loop_oracle():
    x = rng.normal(size=(2, 2, 6, 6))
    got = ops.max_pool2d(Tensor(x), 2).data
    ref = np.array([[[[x[n, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max() for j in range(3)] for i in range(3)] for c in range(2)] for n in range(2)])
    np.testing.assert_array_equal(got, ref)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradient(stride, pad):
    err = check(lambda x, w, b: ops.conv2d(x, w, b, stride, pad), [rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)])
    assert err < TOL


def test_depthwise_gradient():
    err = check(lambda x, w: ops.depthwise_conv2d(x, w, 1, 1), [rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(3, 1, 3, 3))])
    assert err < TOL


def test_depthwise_strided_gradient():
    err = check(lambda x, w: ops.depthwise_conv2d(x, w, 2, 1), [rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(2, 1, 3, 3))])
    assert err < TOL


def test_linear_gradient():
    err = check(lambda x, w, b: ops.linear(x, w, b), [rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.normal(size=3)])
    assert err < TOL


@pytest.mark.parametrize("shape", [(6, 4), (3, 4, 3, 3)])
def test_batchnorm_train_gradient(shape):
    c = shape[1]

    def f(x, g, b):
        return ops.batchnorm(x, g, b, Tensor(np.zeros(c)), Tensor(np.ones(c)), training=True)

    assert check(f, [rng.normal(size=shape), rng.normal(size=c), rng.normal(size=c)]) < TOL


def test_batchnorm_eval_gradient():
    mean, var = Tensor(rng.normal(size=4)), Tensor(rng.uniform(0.5, 2, size=4))

    def f(x, g, b):
        return ops.batchnorm(x, g, b, mean, var, training=False)

    assert check(f, [rng.normal(size=(3, 4, 2, 2)), rng.normal(size=4), rng.normal(size=4)]) < TOL


def test_batchnorm_updates_running_stats():
    x = rng.normal(2.0, 3.0, size=(50, 3))
    rm, rv = Tensor(np.zeros(3)), Tensor(np.ones(3))
    ops.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=True, momentum=0.1)
    np.testing.assert_allclose(rm.data, 0.1 * x.mean(0))
    np.testing.assert_allclose(rv.data, 0.9 + 0.1 * x.var(0, ddof=1))


def test_relu_and_clipped_relu_gradients():
    assert check(ops.relu, [away_from_kinks((4, 5), rng)]) < TOL
    x = away_from_kinks((4, 5), rng, ceiling=1.0)
    assert check(lambda t: ops.clipped_relu(t, 1.0), [x]) < TOL


def test_clipped_relu_is_exact():
    x = Tensor(np.array([-3.0, 0.0, 0.5, 1.0, 7.0]))
    np.testing.assert_array_equal(ops.clipped_relu(x, 1.0).data, [0.0, 0.0, 0.5, 1.0, 1.0])


@pytest.mark.parametrize("op", [ops.sigmoid, ops.softmax, ops.global_average_pool, ops.flatten])
def test_smooth_op_gradients(op):
    shape = (3, 4) if op in (ops.sigmoid, ops.softmax) else (2, 3, 4, 4)
    assert check(op, [rng.normal(size=shape)]) < TOL


def test_max_pool_gradient():
    # distinct values keep the argmax away from ties
    x = rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) * 0.1
    assert check(lambda t: ops.max_pool2d(t, 2), [x]) < TOL
    assert check(lambda t: ops.max_pool2d(t, 3, 2, 1), [x]) < TOL


def test_channel_ops_gradients():
    x = rng.normal(size=(2, 4, 3, 3))
    assert check(ops.channel_scale, [x, rng.normal(size=(2, 4))]) < TOL
    assert check(ops.channel_scale, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]) < TOL
    assert check(lambda t: ops.index_select_channels(t, np.array([0, 2, 3])), [x]) < TOL


def test_arithmetic_gradients():
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert check(ops.add, [a, b]) < TOL
    assert check(ops.mul, [a, b]) < TOL
    assert check(lambda t: ops.scale(t, 2.5), [a]) < TOL


def test_cross_entropy_gradient_and_value():
    logits = rng.normal(size=(5, 3))
    labels = np.array([0, 2, 1, 1, 0])

    def f(z):
        return ops.cross_entropy_loss(z, labels)

    assert check(f, [logits]) < TOL
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    ref = -np.log(p[np.arange(5), labels]).mean()
    np.testing.assert_allclose(f(Tensor(logits)).data, ref, rtol=1e-12)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(InvalidInputError):
        ops.cross_entropy_loss(Tensor(np.zeros((2, 3))), [0, 3])


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.add(ops.mul(x, x), x))
    tape.backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_record_without_grad():
    with Tape() as tape:
        ops.relu(Tensor(np.ones(3)))
    assert len(tape) == 0


def test_backward_needs_scalar_on_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ops.relu(x)
    with pytest.raises(InvalidInputError):
        backward(y, tape)
    with pytest.raises(InvalidInputError):
        Tape().backward(ops.sum(y))


def test_shape_errors():
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(DimensionError):
        ops.linear(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 5))))


def test_sgd_momentum_update_rule():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    vel = {}
    p.grad = np.array([0.5, 0.5])
    sgd_momentum_step([p], 0.1, 0.9, vel)
    np.testing.assert_allclose(p.data, [0.95, -1.05])
    p.grad = np.array([0.5, 0.5])
    sgd_momentum_step([p], 0.1, 0.9, vel)
    # v = 0.9 * 0.5 + 0.5 = 0.95
    np.testing.assert_allclose(p.data, [0.95 - 0.095, -1.05 - 0.095])
    assert p.grad is None


def test_sgd_skips_frozen_and_requires_grads():
    frozen = Tensor(np.ones(2), requires_grad=False)
    live = Tensor(np.ones(2), requires_grad=True)
    opt = SGD([frozen, live], lr=0.1)
    with pytest.raises(InvalidStateError):
        opt.step()
    live.grad = np.ones(2)
    opt.step()
    np.testing.assert_array_equal(frozen.data, 1.0)


def test_zero_lr_leaves_parameters():
    p = Tensor(np.array([3.0]), requires_grad=True)
    p.grad = np.array([10.0])
    sgd_momentum_step([p], 0.0, 0.9, {})
    assert p.data[0] == 3.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(3, 6), st.integers(1, 2), st.integers(0, 1))
def test_conv_output_shape_property(n, c, size, stride, pad):
    x = Tensor(np.zeros((n, c, size, size)))
    w = Tensor(np.zeros((2, c, 3, 3)))
    out = ops.conv2d(x, w, stride=stride, padding=pad)
    assert out.shape == (n, 2, (size + 2 * pad - 3) // stride + 1, (size + 2 * pad - 3) // stride + 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=12))
def test_softmax_rows_normalized(values):
    s = ops.softmax(Tensor(np.array([values]))).data
    assert abs(s.sum() - 1.0) < 1e-12
    assert (s >= 0).all()


def test_float32_default_dtype_kept():
    x = Tensor(np.ones((2, 3), dtype=np.float32))
    assert ops.relu(x).dtype == np.float32
    assert Tensor([1, 2]).dtype == np.float32
