import numpy as np
import pytest

from smoe_edge import autodiff as ad
from smoe_edge.autodiff import Tensor, backward, finite_diff_gradcheck
from smoe_edge.errors import GraphError, ShapeError


def scalar(t):
    return float(t.data)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv2d_all_ones_hand_sum():
    # 3x3 ones against 3x3 ones kernel, padding 1: window overlap counts
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(x, w, Tensor(np.zeros(1)), padding=1)
    expected = np.array([[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]])
    np.testing.assert_array_equal(out.data[0, 0], expected)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 5, 7)))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = ad.conv2d(x, Tensor(w), None)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_zero_input():
    w = Tensor(np.random.default_rng(1).normal(size=(4, 2, 3, 3)))
    out = ad.conv2d(Tensor(np.zeros((1, 2, 6, 6))), w, None, padding=1)
    np.testing.assert_array_equal(out.data, 0.0)


def test_conv2d_linearity_without_bias():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 5, 5))
    y = rng.normal(size=(1, 2, 5, 5))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    a, b = 1.7, -0.3
    lhs = ad.conv2d(Tensor(a * x + b * y), w, None, padding=1).data
    rhs = a * ad.conv2d(Tensor(x), w, None, padding=1).data \
        + b * ad.conv2d(Tensor(y), w, None, padding=1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_conv2d_channel_mismatch_names_shapes():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    w = Tensor(np.zeros((1, 3, 3, 3)))
    with pytest.raises(ShapeError, match=r"2 channels.*expects 3"):
        ad.conv2d(x, w, None, padding=1)


def test_conv2d_rejects_nonpositive_output():
    x = Tensor(np.zeros((1, 1, 2, 2)))
    w = Tensor(np.zeros((1, 1, 5, 5)))
    with pytest.raises(ShapeError):
        ad.conv2d(x, w, None)


def test_conv2d_dilated_output_extent():
    x = Tensor(np.zeros((1, 1, 8, 8)))
    w = Tensor(np.zeros((1, 1, 3, 3)))
    out = ad.conv2d(x, w, None, padding=2, dilation=2)
    assert out.shape == (1, 1, 8, 8)


# ---------------------------------------------------------------------------
# max_pool2d / upsample2x / concat
# ---------------------------------------------------------------------------

def test_max_pool_basic():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = ad.max_pool2d(x)
    assert scalar(ad.reduce(out)) == 4.0


def test_max_pool_constant_input():
    x = Tensor(np.full((1, 2, 4, 4), 2.5))
    out = ad.max_pool2d(x)
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 2.5))


def test_max_pool_backward_routes_to_argmax():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2), requires_grad=True)
    backward(ad.reduce(ad.max_pool2d(x)))
    np.testing.assert_array_equal(x.grad[0, 0], [[0.0, 0.0], [0.0, 1.0]])


def test_max_pool_tie_breaks_first_row_major():
    x = Tensor(np.full((1, 1, 2, 2), 7.0), requires_grad=True)
    backward(ad.reduce(ad.max_pool2d(x)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_max_pool_rejects_indivisible():
    with pytest.raises(ShapeError):
        ad.max_pool2d(Tensor(np.zeros((1, 1, 5, 4))))


def test_upsample2x_replicates():
    x = Tensor(np.array([[1.0, 2.0]]).reshape(1, 1, 1, 2))
    out = ad.upsample2x(x)
    np.testing.assert_array_equal(out.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])


def test_upsample2x_backward_sums_four():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 3, 3)), requires_grad=True)
    backward(ad.reduce(ad.upsample2x(x)))
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 3, 3), 4.0))


def test_concat_channels_order_and_backward():
    a = Tensor(np.full((1, 1, 2, 2), 1.0), requires_grad=True)
    b = Tensor(np.full((1, 1, 2, 2), 2.0), requires_grad=True)
    out = ad.concat_channels(a, b)
    np.testing.assert_array_equal(out.data[0, 0], 1.0)
    np.testing.assert_array_equal(out.data[0, 1], 2.0)
    backward(ad.reduce(out))
    np.testing.assert_array_equal(a.grad, 1.0)
    np.testing.assert_array_equal(b.grad, 1.0)


def test_concat_channel_slice_roundtrip():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(1, 2, 3, 3)))
    out = ad.concat_channels(x, Tensor(np.zeros((1, 1, 3, 3))))
    np.testing.assert_array_equal(out.data[:, :2], x.data)


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(ShapeError):
        ad.concat_channels(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2))))


# ---------------------------------------------------------------------------
# elementwise / reductions
# ---------------------------------------------------------------------------

def test_sigmoid_values_and_gradient():
    x = Tensor(np.zeros((1,)), requires_grad=True)
    out = ad.sigmoid(x)
    assert scalar(out) == 0.5
    backward(ad.reduce(out))
    np.testing.assert_allclose(x.grad, 0.25)


def test_sigmoid_extreme_inputs_stay_finite():
    out = ad.sigmoid(Tensor(np.array([-1e4, 1e4])))
    np.testing.assert_allclose(out.data, [0.0, 1.0])


def test_square_and_gradient():
    x = Tensor(np.array([3.0]), requires_grad=True)
    out = ad.square(x)
    assert scalar(out) == 9.0
    backward(ad.reduce(out))
    np.testing.assert_allclose(x.grad, [6.0])


def test_relu_negative_has_zero_gradient():
    x = Tensor(np.array([-1.0]), requires_grad=True)
    out = ad.relu(x)
    assert scalar(out) == 0.0
    backward(ad.reduce(out))
    np.testing.assert_array_equal(x.grad, [0.0])


def test_map_unary_rejects_unknown():
    with pytest.raises(ValueError):
        ad.map_unary(Tensor(np.zeros(2)), "tanh")


def test_zip_binary_scalar_broadcast():
    out = ad.zip_binary(Tensor(np.array([1.0, 2.0, 3.0])), Tensor(2.0), "mul")
    np.testing.assert_array_equal(out.data, [2.0, 4.0, 6.0])


def test_add_neg_cancels():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 3)))
    out = ad.zip_binary(x, ad.neg(x), "add")
    np.testing.assert_array_equal(out.data, 0.0)


def test_broadcast_backward_reduces_over_channel():
    rng = np.random.default_rng(1)
    gate = Tensor(rng.random((2, 1, 3, 3)), requires_grad=True)
    feats = Tensor(rng.normal(size=(2, 4, 3, 3)))
    backward(ad.reduce(ad.zip_binary(gate, feats, "mul")))
    assert gate.grad.shape == (2, 1, 3, 3)
    np.testing.assert_allclose(gate.grad, feats.data.sum(axis=1, keepdims=True))


def test_zip_binary_rejects_incompatible():
    with pytest.raises(ShapeError):
        ad.zip_binary(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), "add")


def test_reduce_sum_and_mean():
    x = Tensor(np.array([1.0, 2.0, 3.0]))
    assert scalar(ad.reduce(x, "sum")) == 6.0
    assert scalar(ad.reduce(Tensor(np.full((4, 4), 2.5)), "mean")) == 2.5


def test_reduce_mean_backward_is_inverse_count():
    x = Tensor(np.zeros((2, 5)), requires_grad=True)
    backward(ad.reduce(x, "mean"))
    np.testing.assert_allclose(x.grad, 0.1)


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------

def test_backward_sum_grad_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    backward(ad.reduce(x, "sum"))
    np.testing.assert_array_equal(x.grad, 1.0)


def test_backward_mul_self():
    x = Tensor(np.array([3.0]), requires_grad=True)
    backward(ad.reduce(ad.zip_binary(x, x, "mul")))
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ad.square(x))


def test_backward_twice_rejected():
    x = Tensor(np.array([1.0]), requires_grad=True)
    loss = ad.reduce(ad.square(x))
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_accumulation_equals_doubling():
    # a tensor used twice gets the sum of both path gradients
    rng = np.random.default_rng(3)
    vals = rng.normal(size=(4,))
    x = Tensor(vals.copy(), requires_grad=True)
    backward(ad.reduce(ad.zip_binary(ad.square(x), ad.square(x), "add")))
    two_path = x.grad.copy()
    y = Tensor(vals.copy(), requires_grad=True)
    backward(ad.reduce(ad.zip_binary(ad.square(y), Tensor(2.0), "mul")))
    np.testing.assert_allclose(two_path, y.grad, rtol=1e-12)


def test_detach_blocks_gradient():
    x = Tensor(np.array([2.0]), requires_grad=True)
    backward(ad.reduce(ad.zip_binary(x.detach(), x, "mul")))
    np.testing.assert_allclose(x.grad, [2.0])  # only the live factor contributes


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def test_gradcheck_quadratic_is_nearly_exact():
    rng = np.random.default_rng(0)
    point = Tensor(rng.uniform(0.5, 1.5, size=(6,)))
    report = finite_diff_gradcheck(lambda t: ad.reduce(ad.square(t)), point, 1e-5, 1e-8)
    assert report.passed
    assert report.max_rel_error < 1e-8


def test_gradcheck_conv_sigmoid_chain():
    rng = np.random.default_rng(7)
    w = Tensor(rng.normal(size=(2, 1, 3, 3)))
    point = Tensor(rng.normal(size=(1, 1, 4, 4)))
    report = finite_diff_gradcheck(
        lambda t: ad.reduce(ad.sigmoid(ad.conv2d(t, w, None, padding=1))), point, 1e-5, 1e-5)
    assert report.passed


def test_gradcheck_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_gradcheck(lambda t: ad.reduce(t), Tensor(np.zeros(2)), step=0.0)


def test_gradcheck_reports_nonfinite_evaluation():
    def f(t):
        return ad.reduce(ad.zip_binary(Tensor(1.0), ad.reduce(t), "div"))
    # the minus-step probe lands exactly on the zero denominator -> inf
    report = finite_diff_gradcheck(f, Tensor(np.array([1e-5])), step=1e-5, rtol=1e-4)
    assert not report.passed
    assert report.failures
    assert report.failures[0][0] == 0  # offending coordinate is named


def test_broadcast_reduction_duality_per_axis():
    rng = np.random.default_rng(11)
    full = Tensor(rng.normal(size=(2, 3, 4, 5)))
    for axis in range(4):
        shape = [2, 3, 4, 5]
        shape[axis] = 1
        small = Tensor(rng.normal(size=tuple(shape)), requires_grad=True)
        backward(ad.reduce(ad.zip_binary(small, full, "mul")))
        np.testing.assert_allclose(small.grad, full.data.sum(axis=axis, keepdims=True), rtol=1e-12)
        small.zero_grad()
