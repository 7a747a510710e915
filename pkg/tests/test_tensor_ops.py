"""Forward-value checks of the tensor primitives against independent oracles."""

import numpy as np
import numpy.testing as npt
import pytest

from smokediff import tensor as T

F64 = np.float64


def t64(x, rg=False):
    return T.Tensor(np.asarray(x, dtype=F64), requires_grad=rg)


# ---------------------------------------------------------------------------
# conv2d

def naive_conv2d(x, w, stride, pad):
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    y = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                for c in range(c_in):
                    for a in range(kh):
                        for b in range(kw):
                            y[o, i, j] += xp[c, i * stride + a, j * stride + b] * w[o, c, a, b]
    return y


def test_conv2d_1x1_dot():
    y = T.conv2d(t64([[[2.0]]]), t64([[[[3.0]]]]), stride=1, padding=0)
    npt.assert_allclose(y.data, [[[6.0]]])


def test_conv2d_identity_kernel():
    x = np.arange(16, dtype=F64).reshape(1, 4, 4)
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    y = T.conv2d(t64(x), t64(k), stride=1, padding=1)
    npt.assert_array_equal(y.data, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_naive_loop(np_rng, stride, pad):
    x = np_rng.standard_normal((1, 5, 5))
    w = np_rng.standard_normal((1, 1, 3, 3))
    y = T.conv2d(t64(x), t64(w), stride=stride, padding=pad)
    npt.assert_allclose(y.data, naive_conv2d(x, w, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv2d_multichannel_matches_naive(np_rng):
    x = np_rng.standard_normal((3, 6, 7))
    w = np_rng.standard_normal((4, 3, 3, 3))
    b = np_rng.standard_normal(4)
    y = T.conv2d(t64(x), t64(w), t64(b), stride=2, padding=1)
    npt.assert_allclose(y.data, naive_conv2d(x, w, 2, 1) + b[:, None, None], rtol=1e-10, atol=1e-12)


def test_conv2d_channel_mismatch_rejected(np_rng):
    with pytest.raises(ValueError, match="channel mismatch"):
        T.conv2d(t64(np_rng.standard_normal((3, 4, 4))), t64(np_rng.standard_normal((2, 4, 3, 3))))


# ---------------------------------------------------------------------------
# conv2d_transpose

def test_conv2d_transpose_1x1_dot():
    y = T.conv2d_transpose(t64([[[2.0]]]), t64([[[[3.0]]]]), stride=1, padding=0)
    npt.assert_allclose(y.data, [[[6.0]]])


def test_conv2d_transpose_doubles_with_k4_s2_p1(np_rng):
    x = t64(np_rng.standard_normal((3, 8, 8)))
    w = t64(np_rng.standard_normal((3, 5, 4, 4)))
    y = T.conv2d_transpose(x, w, stride=2, padding=1)
    assert y.shape == (5, 16, 16)


@pytest.mark.parametrize("kh,stride,pad", [(3, 1, 0), (3, 1, 1), (3, 2, 1), (4, 2, 1), (1, 1, 0)])
def test_conv_adjoint_identity(np_rng, kh, stride, pad):
    x = np_rng.standard_normal((3, 8, 8))
    w = np_rng.standard_normal((5, 3, kh, kh))
    y = T.conv2d(t64(x), t64(w), stride=stride, padding=pad)
    g = np_rng.standard_normal(y.shape)
    xb = T.conv2d_transpose(t64(g), t64(w), stride=stride, padding=pad, output_size=(8, 8))
    lhs = float(np.sum(y.data * g))
    rhs = float(np.sum(x * xb.data))
    assert abs(lhs - rhs) / abs(lhs) < 1e-6


def test_conv2d_transpose_inconsistent_output_size_rejected(np_rng):
    x = t64(np_rng.standard_normal((2, 4, 4)))
    w = t64(np_rng.standard_normal((2, 2, 3, 3)))
    with pytest.raises(ValueError, match="output_size"):
        T.conv2d_transpose(x, w, stride=2, padding=1, output_size=(64, 64))


# ---------------------------------------------------------------------------
# group_norm

def test_group_norm_constant_input_yields_beta(np_rng):
    x = t64(np.full((4, 3, 3), 2.5))
    gamma = t64(np_rng.standard_normal(4))
    beta = t64(np_rng.standard_normal(4))
    y = T.group_norm(x, 2, gamma, beta, eps=1e-5)
    npt.assert_allclose(y.data, np.broadcast_to(beta.data[:, None, None], (4, 3, 3)), atol=1e-12)


def test_group_norm_one_group_is_global_norm(np_rng):
    x = np_rng.standard_normal((4, 3, 3))
    y = T.group_norm(t64(x), 1, t64(np.ones(4)), t64(np.zeros(4)), eps=1e-12)
    expected = (x - x.mean()) / np.sqrt(x.var() + 1e-12)
    npt.assert_allclose(y.data, expected, rtol=1e-9, atol=1e-12)


def test_group_norm_moments_per_group(np_rng):
    x = np_rng.standard_normal((4, 4, 4)) * 3.0 + 1.0
    y = T.group_norm(t64(x), 2, t64(np.ones(4)), t64(np.zeros(4)), eps=1e-10)
    for grp in y.data.reshape(2, -1):
        assert abs(grp.mean()) < 1e-6
        assert abs(grp.var() - 1.0) < 1e-4


def test_group_norm_rejects_indivisible_groups(np_rng):
    x = t64(np_rng.standard_normal((3, 2, 2)))
    with pytest.raises(ValueError, match="divisible"):
        T.group_norm(x, 2, t64(np.ones(3)), t64(np.zeros(3)))


# ---------------------------------------------------------------------------
# silu / linear

def test_silu_values():
    y = T.silu(t64([0.0, 20.0, 1.0]))
    assert y.data[0] == 0.0
    assert abs(y.data[1] - 20.0) < 1e-6
    # high-precision scalar oracle: 1/(1+e^-1)
    npt.assert_allclose(y.data[2], 0.7310585786300049, rtol=1e-12)


def test_linear_identity_and_scalar():
    x = t64([1.0, -2.0, 3.0])
    y = T.linear(x, t64(np.eye(3)), t64(np.zeros(3)))
    npt.assert_array_equal(y.data, x.data)
    y2 = T.linear(t64([3.0]), t64([[2.0]]), t64([1.0]))
    npt.assert_allclose(y2.data, [7.0])


def test_linear_matches_naive(np_rng):
    x = np_rng.standard_normal(8)
    w = np_rng.standard_normal((8, 8))
    b = np_rng.standard_normal(8)
    expected = np.array([sum(w[i, j] * x[j] for j in range(8)) + b[i] for i in range(8)])
    npt.assert_allclose(T.linear(t64(x), t64(w), t64(b)).data, expected, rtol=1e-12)


def test_linear_dimension_mismatch_rejected(np_rng):
    with pytest.raises(ValueError):
        T.linear(t64(np_rng.standard_normal(3)), t64(np_rng.standard_normal((2, 4))), t64(np.zeros(2)))


# ---------------------------------------------------------------------------
# self_attention

def naive_attention(x, wq, wk, wv, wo):
    d_k = wq.shape[0]
    q, k, v = wq @ x, wk @ x, wv @ x
    logits = (k.T @ q) / np.sqrt(d_k)
    a = np.exp(logits - logits.max(axis=0))
    a = a / a.sum(axis=0)
    return wo @ (v @ a) + x


def test_attention_single_position(np_rng):
    x = np_rng.standard_normal((4, 1))
    ws = [np_rng.standard_normal((4, 4)) for _ in range(4)]
    y = T.self_attention(t64(x), *[t64(w) for w in ws])
    expected = ws[3] @ (ws[2] @ x) + x  # weight on the lone position is exactly 1
    npt.assert_allclose(y.data, expected, rtol=1e-10)


def test_attention_zero_query_is_mean_pooling(np_rng):
    x = np_rng.standard_normal((4, 9))
    wk, wv, wo = (np_rng.standard_normal((4, 4)) for _ in range(3))
    y = T.self_attention(t64(x), t64(np.zeros((4, 4))), t64(wk), t64(wv), t64(wo))
    pooled = (wv @ x).mean(axis=1, keepdims=True)
    npt.assert_allclose(y.data, wo @ np.broadcast_to(pooled, (4, 9)) + x, rtol=1e-9)


def test_attention_matches_dense_oracle(np_rng):
    x = np_rng.standard_normal((4, 9))
    ws = [np_rng.standard_normal((4, 4)) for _ in range(4)]
    y = T.self_attention(t64(x), *[t64(w) for w in ws])
    npt.assert_allclose(y.data, naive_attention(x, *ws), rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------------------
# concat / slice / misc

def test_concat_orders_channels(np_rng):
    a = np_rng.standard_normal((1, 2, 2))
    b = np_rng.standard_normal((1, 2, 2))
    y = T.concat_channels(t64(a), t64(b))
    assert y.shape == (2, 2, 2)
    npt.assert_array_equal(y.data[0], a[0])
    npt.assert_array_equal(y.data[1], b[0])


def test_concat_slice_roundtrip(np_rng):
    a = t64(np_rng.standard_normal((2, 3, 3)))
    b = t64(np_rng.standard_normal((3, 3, 3)))
    y = T.concat_channels(a, b)
    npt.assert_array_equal(T.slice_channels(y, 0, 2).data, a.data)
    npt.assert_array_equal(T.slice_channels(y, 2, 5).data, b.data)


def test_concat_spatial_mismatch_rejected(np_rng):
    with pytest.raises(ValueError, match="spatial"):
        T.concat_channels(t64(np_rng.standard_normal((1, 2, 2))), t64(np_rng.standard_normal((1, 3, 2))))


def test_mse_values(np_rng):
    a = np_rng.standard_normal((3, 4))
    assert T.mse(t64(a), t64(a)).item() == 0.0
    shifted = T.mse(t64(a + 0.5), t64(a)).item()
    npt.assert_allclose(shifted, 0.25, rtol=1e-12)


def test_forward_determinism(np_rng):
    x = np_rng.standard_normal((3, 8, 8))
    w = np_rng.standard_normal((4, 3, 3, 3))
    y1 = T.conv2d(t64(x), t64(w), stride=1, padding=1).data
    y2 = T.conv2d(t64(x), t64(w), stride=1, padding=1).data
    assert np.array_equal(y1, y2)


def test_no_nan_on_finite_inputs():
    x = t64(np.array([-1e4, -50.0, 0.0, 50.0, 1e4]))
    y = T.silu(x)
    assert np.all(np.isfinite(y.data))
    logits = T.softmax_over_rows(t64(np.array([[1e4], [-1e4], [0.0]])))
    assert np.all(np.isfinite(logits.data))


def test_check_finite_raises():
    t = T.Tensor(np.array([1.0, np.inf]))
    with pytest.raises(T.NonFiniteError):
        t.check_finite("probe")
