import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guidedconv import ops
from guidedconv.nn import BatchNorm2d, Conv2d
from guidedconv.tensor import Tensor, backward, no_grad, precision
from oracles import conv2d_loops, directional_check, max_rel_error, numeric_grad


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- conv2d ------------------------------------------------------------------

def test_conv2d_sum_of_ones():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.shape == (1, 1, 3, 3)
    assert out.data[0, 0, 1, 1] == 9


def test_conv2d_identity_kernel(rng):
    x = rng.normal(size=(2, 3, 5, 6))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    out = ops.conv2d(Tensor(x), Tensor(w), padding=1)
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_strided_matches_loops():
    x = np.arange(1, 17, dtype=np.float64).reshape(1, 1, 4, 4)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 0, 0] = 1.0
    w[0, 0, 1, 1] = 1.0  # 2x2 [1,0;0,1] in the top-left of a zero-ringed 3x3
    expected = conv2d_loops(x, w, stride=2, padding=0)
    out = ops.conv2d(Tensor(x), Tensor(w), stride=2)
    np.testing.assert_array_equal(out.data, expected)
    # also with padding
    np.testing.assert_allclose(ops.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data,
                               conv2d_loops(x, w, stride=2, padding=1))


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5)])
def test_conv2d_random_matches_loops(rng, stride, padding, k):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, stride, padding), rtol=1e-12, atol=1e-12)


def test_conv2d_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(1, 2, 4, 4\).*\(3, 5, 3, 3\)"):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))


def test_conv2d_rejects_even_kernel():
    with pytest.raises(ValueError, match="odd"):
        ops.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


# -- deconv2d ----------------------------------------------------------------

def test_deconv_identity_stride1(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
    out = ops.deconv2d(Tensor(x), Tensor(w), stride=1, padding=1)
    np.testing.assert_array_equal(out.data, x)


def test_deconv_zero_insertion():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = ops.deconv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), stride=2, padding=0, output_padding=1)
    assert out.shape == (1, 1, 4, 4)
    nz = np.argwhere(out.data[0, 0] != 0)
    assert all(r % 2 == 0 and c % 2 == 0 for r, c in nz)
    np.testing.assert_array_equal(out.data[0, 0, ::2, ::2], x[0, 0])


def test_deconv_doubles_resolution():
    out = ops.deconv2d(Tensor(np.zeros((1, 3, 5, 7))), Tensor(np.zeros((3, 2, 3, 3))),
                       stride=2, padding=1, output_padding=1)
    assert out.shape == (1, 2, 10, 14)


@pytest.mark.parametrize("stride,padding,op", [(1, 1, 0), (2, 1, 1), (2, 0, 0), (3, 1, 2)])
def test_deconv_conv_adjoint(rng, stride, padding, op):
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(3, 4, 3, 3))
    d = ops.deconv2d(Tensor(x), Tensor(w), stride=stride, padding=padding, output_padding=op)
    y = rng.normal(size=d.shape)
    c = ops.conv2d(Tensor(y), Tensor(w), stride=stride, padding=padding)
    lhs, rhs = np.sum(d.data * y), np.sum(x * c.data)
    assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), 1.0)


def test_conv_gradient_is_deconv(rng):
    # the input-gradient of conv2d is the transposed convolution of the upstream gradient
    x = t64(rng.normal(size=(1, 2, 6, 6)))
    w = rng.normal(size=(3, 2, 3, 3))
    out = ops.conv2d(x, Tensor(w), stride=2, padding=1)
    g = rng.normal(size=out.shape)
    backward(ops.sum(ops.mul(out, g)))
    np.testing.assert_allclose(x.grad, ops.deconv2d(Tensor(g), Tensor(w), stride=2, padding=1, output_padding=1).data,
                               rtol=1e-12, atol=1e-12)


# -- batch norm --------------------------------------------------------------

def test_batch_norm_constant_channel_gives_beta():
    x = Tensor(np.full((2, 1, 3, 3), 4.0))
    out = ops.batch_norm(x, Tensor(np.array([2.0])), Tensor(np.array([0.7])))
    np.testing.assert_allclose(out.data, 0.7)


def test_batch_norm_standardises(rng):
    x = 5.0 + 2.0 * rng.standard_normal((8, 2, 16, 16))
    out = ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    for c in range(2):
        assert abs(out[:, c].mean()) < 1e-6
        assert abs(out[:, c].std() - 1.0) < 1e-4


def test_batch_norm_running_stats_and_eval(rng):
    bn = BatchNorm2d(3)
    x = Tensor(rng.normal(loc=2.0, size=(4, 3, 5, 5)))
    bn(x)
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.data.mean(axis=(0, 2, 3)))
    bn.eval()
    y = bn(x).data
    expect = (x.data - bn.running_mean.reshape(1, 3, 1, 1)) / np.sqrt(bn.running_var.reshape(1, 3, 1, 1) + 1e-5)
    np.testing.assert_allclose(y, expect, rtol=1e-5, atol=1e-5)


def test_batch_norm_rejects_bad_shapes():
    with pytest.raises(ValueError):
        ops.batch_norm(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    with pytest.raises(ValueError):
        ops.batch_norm(Tensor(np.zeros((0, 2, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


# -- small ops ---------------------------------------------------------------

def test_avg_pool_global_and_relu():
    out = ops.avg_pool_global(Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 2.5
    r = ops.relu(Tensor(np.array([-3.0, 3.0]))).data
    assert r.tolist() == [0.0, 3.0]


def test_fully_connected_affine(rng):
    x = rng.normal(size=(3, 4, 1, 1))
    w = rng.normal(size=(5, 4))
    b = rng.normal(size=5)
    out = ops.fully_connected(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_allclose(out.data, x.reshape(3, 4) @ w.T + b)
    with pytest.raises(ValueError):
        ops.fully_connected(Tensor(x), Tensor(rng.normal(size=(5, 3))))


# -- gradients vs finite differences (64-bit) --------------------------------

def _check_elementwise(build_loss, arrays):
    """Compare tape gradients of every array with per-element central differences."""
    tensors = [t64(a) for a in arrays]
    backward(build_loss(*tensors))
    worst = 0.0
    for t in tensors:
        data = t.data

        def f():
            with no_grad():
                return float(build_loss(*tensors).data)

        worst = max(worst, max_rel_error(t.grad, numeric_grad(f, data)))
    return worst


def test_conv2d_gradient(rng):
    r = rng.normal(size=(2, 4, 3, 3))
    err = _check_elementwise(lambda x, w, b: ops.sum(ops.mul(ops.conv2d(x, w, b, stride=2, padding=1), r)),
                             [rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)])
    assert err < 1e-5


def test_deconv2d_gradient(rng):
    r = rng.normal(size=(2, 2, 8, 8))
    err = _check_elementwise(
        lambda x, w, b: ops.sum(ops.mul(ops.deconv2d(x, w, b, stride=2, padding=1, output_padding=1), r)),
        [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=2)])
    assert err < 1e-5


def test_batch_norm_gradient(rng):
    r = rng.normal(size=(2, 2, 3, 3))
    err = _check_elementwise(lambda x, g, b: ops.sum(ops.mul(ops.batch_norm(x, g, b), r)),
                             [rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2), rng.normal(size=2)])
    assert err < 1e-5


def test_fully_connected_gradient(rng):
    r = rng.normal(size=(3, 5))
    err = _check_elementwise(lambda x, w, b: ops.sum(ops.mul(ops.fully_connected(x, w, b), r)),
                             [rng.normal(size=(3, 4, 1, 1)), rng.normal(size=(5, 4)), rng.normal(size=5)])
    assert err < 1e-5


def test_pool_relu_concat_gradient(rng):
    r = rng.normal(size=(2, 5, 1, 1))

    def loss(a, b):
        return ops.sum(ops.mul(ops.avg_pool_global(ops.relu(ops.concat([a, b], axis=1))), r))

    err = _check_elementwise(loss, [rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 3, 3, 3))])
    assert err < 1e-5


# -- backward ----------------------------------------------------------------

def test_backward_sum_gives_ones(rng):
    x = t64(rng.normal(size=(2, 3, 4, 4)))
    backward(ops.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


def test_backward_quadratic(rng):
    x = t64(rng.normal(size=(1, 2, 3, 3)))
    backward(ops.mul(ops.sum(ops.square(x)), 0.5))
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_accumulates_shared_use(rng):
    x = t64(rng.normal(size=(1, 1, 2, 2)))
    backward(ops.sum(ops.add(x, ops.mul(x, 3.0))))
    np.testing.assert_allclose(x.grad, 4.0)


def test_backward_rejects_non_scalar():
    x = t64(np.ones((1, 1, 2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        backward(ops.mul(x, 2.0))


def test_backward_leaves_unreachable_untouched(rng):
    a = t64(rng.normal(size=(1, 1, 2, 2)))
    b = t64(rng.normal(size=(1, 1, 2, 2)))
    _ = ops.mul(b, 2.0)
    backward(ops.sum(a))
    assert a.grad is not None and b.grad is None


def test_composite_directional_derivative(rng):
    x = rng.normal(size=(2, 2, 6, 6))
    w1 = rng.normal(size=(3, 2, 3, 3))
    w2 = rng.normal(size=(3, 2, 3, 3))
    g, b = rng.normal(size=3), rng.normal(size=3)
    arrays = [x, w1, w2, g, b]

    def graph(xt, w1t, w2t, gt, bt):
        h = ops.relu(ops.batch_norm(ops.conv2d(xt, w1t, stride=2, padding=1), gt, bt))
        up = ops.deconv2d(h, w2t, stride=2, padding=1, output_padding=1)
        return ops.sum(ops.square(ops.add(up, xt)))

    tensors = [t64(a) for a in arrays]
    backward(graph(*tensors))

    def f():
        with no_grad():
            return float(graph(*tensors).data)

    err = directional_check(f, [t.grad for t in tensors], [t.data for t in tensors], rng, h=1e-5)
    assert err < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(3, 7), st.integers(1, 2))
def test_adjointness_property(n, ci, co, size, stride):
    rng = np.random.default_rng(n * 1000 + ci * 100 + co * 10 + size)
    x = rng.normal(size=(n, ci, size, size))
    w = rng.normal(size=(ci, co, 3, 3))
    d = ops.deconv2d(Tensor(x), Tensor(w), stride=stride, padding=1, output_padding=stride - 1)
    y = rng.normal(size=d.shape)
    c = ops.conv2d(Tensor(y), Tensor(w), stride=stride, padding=1)
    lhs, rhs = float(np.sum(d.data * y)), float(np.sum(x * c.data))
    assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), abs(rhs), 1.0)


def test_determinism_bit_identical(rng):
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    outs = []
    for _ in range(2):
        conv = Conv2d(3, 4, rng=np.random.default_rng(7))
        y = ops.relu(conv(Tensor(x)))
        backward(ops.sum(ops.square(y)))
        outs.append((y.data.copy(), conv.weight.grad.copy()))
    assert np.array_equal(outs[0][0], outs[1][0]) and np.array_equal(outs[0][1], outs[1][1])


def test_precision_modes():
    with precision("float64"):
        assert Conv2d(1, 1).weight.dtype == np.float64
    assert Conv2d(1, 1).weight.dtype == np.float32


def test_finite_outputs_for_finite_inputs(rng):
    x = Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
    y = ops.batch_norm(ops.conv2d(x, Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32)), padding=1),
                       Tensor(np.ones(4, np.float32)), Tensor(np.zeros(4, np.float32)))
    assert np.all(np.isfinite(y.data))
