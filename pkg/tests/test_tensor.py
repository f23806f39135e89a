import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trunet import kernels as K
from trunet import tensor as T
from trunet.errors import ConfigurationError, UsageError
from trunet.gradcheck import finite_diff_check
from trunet.tensor import Tensor, backward, no_grad


def leaf(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


# -- conv3d -------------------------------------------------------------------------

def test_conv3d_identity_kernel():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 5, 4, 3)).astype(np.float32))
    w = Tensor(np.ones((1, 1, 1, 1, 1), dtype=np.float32))
    np.testing.assert_array_equal(K.conv3d(x, w).data, x.data)


def test_conv3d_ones_kernel_center_matches_window_sum():
    x = Tensor(np.ones((1, 1, 5, 5, 5)))
    w = Tensor(np.ones((1, 1, 3, 3, 3)))
    out = K.conv3d(x, w, padding=1).data
    # direct summation over the padded 3^3 window
    padded = np.pad(x.data[0, 0], 1)
    oracle = padded[2:5, 2:5, 2:5].sum()  # centre 2 sits at padded index 3
    assert out[0, 0, 2, 2, 2] == oracle == 27
    assert out[0, 0, 0, 0, 0] == 8  # corner sees a 2^3 window


def test_conv3d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 5, 4, 6))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    got = K.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    want = np.zeros(got.shape)
    for o in range(3):
        for i in range(got.shape[2]):
            for j in range(got.shape[3]):
                for k in range(got.shape[4]):
                    win = xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3, 2 * k:2 * k + 3]
                    want[0, o, i, j, k] = (win * w[o]).sum() + b[o]
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv3d_stride2_shape():
    out = K.conv3d(Tensor(np.zeros((1, 1, 16, 16, 16))), Tensor(np.zeros((2, 1, 3, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 2, 8, 8, 8)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 9), k=st.sampled_from([1, 3, 5]), stride=st.integers(1, 3), pad=st.integers(0, 2))
def test_conv3d_output_extent_floor_formula(d, k, stride, pad):
    expected = (d + 2 * pad - k) // stride + 1
    x = Tensor(np.zeros((1, 1, d, d, d)))
    w = Tensor(np.zeros((1, 1, k, k, k)))
    if expected < 1:
        with pytest.raises(ConfigurationError):
            K.conv3d(x, w, stride=stride, padding=pad)
    else:
        assert K.conv3d(x, w, stride=stride, padding=pad).shape[2:] == (expected,) * 3


def test_conv3d_channel_mismatch():
    with pytest.raises(ConfigurationError):
        K.conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((1, 3, 3, 3, 3))))


def test_conv3d_even_kernel_rejected():
    with pytest.raises(ConfigurationError):
        K.conv3d(Tensor(np.zeros((1, 1, 4, 4, 4))), Tensor(np.zeros((1, 1, 2, 2, 2))))


# -- trilinear -----------------------------------------------------------------------

def test_trilinear_constant_volume():
    x = Tensor(np.full((1, 2, 3, 2, 4), 7.5))
    out = K.trilinear_upsample(x, 2)
    assert out.shape == (1, 2, 6, 4, 8)
    np.testing.assert_allclose(out.data, 7.5)


def test_trilinear_factor_one_is_bitwise_identity():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 3, 3, 3)).astype(np.float32))
    assert np.array_equal(K.trilinear_upsample(x, 1).data, x.data)


def _half_pixel_linear(values, n_out):
    """Hand formula: sample position (i + 0.5) * n_in / n_out - 0.5, clamped."""
    n_in = len(values)
    out = []
    for i in range(n_out):
        src = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        out.append(values[lo] * (1 - t) + values[hi] * t)
    return out


def test_trilinear_ramp_matches_hand_formula():
    x = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 2, 1, 1))
    full = K.trilinear_upsample(x, 2).data
    assert full.shape == (1, 1, 4, 2, 2)
    out = full[0, 0, :, 0, 0]
    np.testing.assert_allclose(out, [0.0, 0.25, 0.75, 1.0])
    np.testing.assert_allclose(out, _half_pixel_linear([0.0, 1.0], 4))


# -- matmul / softmax ----------------------------------------------------------------

def test_matmul_examples():
    b = np.random.default_rng(0).standard_normal((3, 2))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)
    np.testing.assert_array_equal(T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]])).data,
                                  [[17.0], [39.0]])
    a = np.random.default_rng(1).standard_normal((2, 3))
    batch = T.matmul(Tensor(np.stack([a, a])), Tensor(np.stack([b, b]))).data
    np.testing.assert_array_equal(batch[0], batch[1])


def test_matmul_inner_mismatch():
    with pytest.raises(ConfigurationError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros((2, 5))), axis=1).data, 0.2)
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0]), axis=0).data,
                               [0.09003, 0.24473, 0.66524], atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_properties(logits, shift):
    x = np.array(logits)
    p = T.softmax(Tensor(x), axis=0).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-6
    np.testing.assert_allclose(T.softmax(Tensor(x + shift), axis=0).data, p, atol=1e-6)


def test_softmax_overflow_safe():
    p = T.softmax(Tensor(np.array([1000.0, 1000.0])), axis=0).data
    np.testing.assert_allclose(p, [0.5, 0.5])


# -- normalization -------------------------------------------------------------------

def test_group_norm_constant_input_is_zero():
    x = Tensor(np.full((1, 4, 2, 2, 2), 3.0))
    out = K.group_norm(x, 2, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, 0.0)


def test_group_norm_zero_gamma_gives_beta():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 4, 2, 2, 2)))
    beta = np.array([1.0, -2.0, 0.5, 3.0])
    out = K.group_norm(x, 2, Tensor(np.zeros(4)), Tensor(beta))
    np.testing.assert_allclose(out.data, np.broadcast_to(beta.reshape(1, 4, 1, 1, 1), out.shape))


def test_group_norm_matches_two_pass_statistics():
    x = np.random.default_rng(2).standard_normal((1, 4, 2, 2, 2))
    out = K.group_norm(Tensor(x), 2, Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    for g in range(2):
        block = x[0, 2 * g: 2 * g + 2]
        mu = sum(block.ravel()) / block.size
        var = sum((v - mu) ** 2 for v in block.ravel()) / block.size
        np.testing.assert_allclose(out[0, 2 * g: 2 * g + 2], (block - mu) / math.sqrt(var + 1e-5), atol=1e-6)


def test_group_norm_indivisible_groups():
    with pytest.raises(ConfigurationError):
        K.group_norm(Tensor(np.zeros((1, 6, 2, 2, 2))), 4, Tensor(np.ones(6)), Tensor(np.zeros(6)))


def test_default_groups_clamps():
    assert K.default_groups(64) == 32
    assert K.default_groups(8) == 8
    assert K.default_groups(48) == 24


def test_layer_norm_examples():
    out = K.layer_norm(Tensor(np.array([[-1.0, 1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]])
    const = K.layer_norm(Tensor(np.full((3, 4), 2.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(const.data, 0.0)
    beta = np.array([0.1, 0.2, 0.3, 0.4])
    rnd = K.layer_norm(Tensor(np.random.default_rng(0).standard_normal((5, 4))), Tensor(np.full(4, 2.0)),
                       Tensor(beta))
    np.testing.assert_allclose(rnd.data.mean(axis=-1), beta.mean(), atol=1e-6)


# -- pointwise -----------------------------------------------------------------------

def test_pointwise_examples():
    np.testing.assert_array_equal(T.relu(Tensor([-2.0, 0.0, 3.0])).data, [0.0, 0.0, 3.0])
    out = T.prelu(Tensor(np.array([-4.0]).reshape(1, 1)), Tensor(np.array([0.25])))
    assert out.data.item() == -1.0
    pooled = K.maxpool3d(Tensor(np.full((1, 1, 4, 4, 4), 2.0)), 2, 2)
    assert pooled.shape == (1, 1, 2, 2, 2)
    np.testing.assert_array_equal(pooled.data, 2.0)


def test_concat_off_axis_mismatch():
    with pytest.raises(ConfigurationError):
        T.concat([Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((1, 2, 4)))], axis=1)


def test_gelu_exact_values():
    x = np.array([-1.0, 0.0, 2.0])
    want = [v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in x]
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, want, rtol=1e-12)


# -- backward ------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = leaf(np.random.default_rng(0).standard_normal((2, 2, 2)))
    backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 2, 2)))


def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0, 3.0])
    backward(T.tsum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_disconnected_leaf_grad_zero():
    x = leaf([1.0, 2.0])
    y = leaf([3.0, 4.0])
    backward(T.tsum(x * 2.0))
    np.testing.assert_array_equal(y.grad, [0.0, 0.0])


def test_non_scalar_loss_rejected():
    with pytest.raises(UsageError):
        backward(leaf([1.0, 2.0]) * 2.0)


def test_shared_leaf_accumulates_over_paths():
    x = leaf([1.0, -2.0])
    backward(T.tsum(x * 3.0 + x * x))
    np.testing.assert_array_equal(x.grad, [3.0 + 2.0, 3.0 - 4.0])


def test_no_tape_without_requires_grad():
    a = Tensor(np.ones(3))
    out = a * 2.0 + 1.0
    assert not out.requires_grad and out.is_leaf


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_tape_freed_after_backward():
    x = leaf([1.0, 2.0])
    mid = x * x
    loss = T.tsum(mid)
    backward(loss)
    assert mid.is_leaf and loss.is_leaf


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 1000))
def test_add_and_concat_split_gradients_exactly(a_len, b_len, seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng.standard_normal(a_len))
    b = leaf(rng.standard_normal(b_len))
    g = rng.standard_normal(a_len + b_len)
    backward(T.tsum(T.concat([a, b], axis=0) * Tensor(g)))
    np.testing.assert_array_equal(np.concatenate([a.grad, b.grad]), g)

    c = leaf(rng.standard_normal(a_len))
    d = leaf(rng.standard_normal(a_len))
    h = rng.standard_normal(a_len)
    backward(T.tsum((c + d) * Tensor(h)))
    np.testing.assert_array_equal(c.grad, h)
    np.testing.assert_array_equal(d.grad, h)


# -- finite differences --------------------------------------------------------------

def test_gradcheck_sum_of_squares_tight():
    x = leaf(np.random.default_rng(0).standard_normal(6))
    report = finite_diff_check(lambda v: T.tsum(v * v), x, eps=1e-5, tol=1e-6)
    assert report.passed, report


def test_gradcheck_softmax_pick():
    x = leaf(np.random.default_rng(1).standard_normal((2, 4)))
    report = finite_diff_check(lambda v: T.tsum(T.softmax(v, axis=1)[:, 2]), x, tol=1e-4)
    assert report.passed, report


def test_gradcheck_catches_corrupted_rule():
    def bad_square(x):
        xd = x.data
        return T.make_result(xd * xd, (x,), lambda g: (g * xd,))  # missing factor 2

    x = leaf(np.random.default_rng(2).standard_normal(4))
    report = finite_diff_check(lambda v: T.tsum(bad_square(v)), x)
    assert not report.passed


@settings(max_examples=10, deadline=None)
@given(st.integers(2, 4), st.integers(1, 2), st.integers(0, 100))
def test_gradcheck_random_conv_shapes(d, cin, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.standard_normal((1, cin, d, d, d)))
    w = Tensor(rng.standard_normal((2, cin, 3, 3, 3)))
    proj = Tensor(rng.standard_normal((1, 2, d, d, d)))
    report = finite_diff_check(lambda v: T.tsum(K.conv3d(v, w, padding=1) * proj), x)
    assert report.passed, report
