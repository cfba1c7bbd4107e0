import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segfsl import tensor_nn as T


def naive_conv(x, w, b, stride, pad):
    """Direct NHWC convolution by explicit loops; weight (kh, kw, C, O)."""
    n, h, wd, c = x.shape
    kh, kw, _, o = w.shape
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c))
    xp[:, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((n, oh, ow, o))
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
            for k in range(o):
                y[:, i, j, k] = (patch * w[:, :, :, k]).sum(axis=(1, 2, 3))
    return y + (0 if b is None else b)


def grad_check(fwd, bwd, inputs, rng, eps=1e-6):
    """Worst relative error of every analytic gradient against central differences.

    ``fwd(*inputs)`` returns y; ``bwd(dy)`` returns gradients in input order.
    The scalar probed is sum(y * r) for a fixed random r.
    """
    y = fwd(*inputs)
    r = rng.standard_normal(y.shape)
    grads = bwd(r)
    worst = 0.0
    for k, (x, g) in enumerate(zip(inputs, grads)):
        if g is None:
            continue

        def f(v, k=k):
            args = list(inputs)
            args[k] = v
            return fwd(*args) * r

        worst = max(worst, T.finite_diff_check(f, x, g, eps=eps))
    return worst


@pytest.mark.parametrize("stride,pad,kh", [(1, 1, 3), (1, 0, 3), (2, 1, 3), (1, 0, 1)])
@pytest.mark.parametrize("c", [2, 20])
def test_conv_matches_loop_oracle(stride, pad, kh, c):
    rng = np.random.default_rng(c + kh)
    x = rng.standard_normal((2, 7, 6, c))
    w = rng.standard_normal((kh, kh, c, 3))
    b = rng.standard_normal(3)
    y, _ = T.conv2d_forward(x, w, b, stride, pad)
    np.testing.assert_allclose(y, naive_conv(x, w, b, stride, pad), atol=1e-10)


def test_conv_identity_and_bias():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5, 4, 3))
    w = np.eye(3).reshape(1, 1, 3, 3)
    y, _ = T.conv2d_forward(x, w, np.zeros(3))
    np.testing.assert_array_equal(y, x)
    y, _ = T.conv2d_forward(np.zeros((1, 4, 4, 3)), rng.standard_normal((3, 3, 3, 2)), np.array([1.5, -2.0]),
                            padding=1)
    np.testing.assert_array_equal(y[..., 0], 1.5)
    np.testing.assert_array_equal(y[..., 1], -2.0)


@pytest.mark.parametrize("seed", range(20))
def test_layer_gradients_fd(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.choice([2, 3, 17]))
    x = rng.standard_normal((2, 6, 5, c))
    w = rng.standard_normal((3, 3, c, 4))
    b = rng.standard_normal(4)
    caches = {}

    def conv(x, w, b):
        y, caches["c"] = T.conv2d_forward(x, w, b, 1, 1)
        return y

    assert grad_check(conv, lambda dy: T.conv2d_backward(dy, caches["c"]), [x, w, b], rng) <= 1e-4

    gamma = rng.uniform(0.5, 1.5, c)
    beta = rng.standard_normal(c)

    def bn(x, gamma, beta):
        y, caches["b"] = T.batch_norm_forward(x, gamma, beta, np.zeros(c), np.ones(c), True)
        return y

    assert grad_check(bn, lambda dy: T.batch_norm_backward(dy, caches["b"]), [x, gamma, beta], rng) <= 1e-4

    def lrelu(x):
        y, caches["l"] = T.leaky_relu_forward(x, 0.01)
        return y

    assert grad_check(lrelu, lambda dy: [T.leaky_relu_backward(dy, caches["l"])], [x], rng) <= 1e-4

    xm = rng.permutation(np.arange(2 * 6 * 6 * c, dtype=float)).reshape(2, 6, 6, c) * 0.1

    def mp(x):
        y, caches["m"] = T.max_pool_2x2_forward(x)
        return y

    assert grad_check(mp, lambda dy: [T.max_pool_2x2_backward(dy, caches["m"])], [xm], rng) <= 1e-4

    def ap(x):
        y, caches["a"] = T.adaptive_avg_pool_forward(x, 4, 3)
        return y

    assert grad_check(ap, lambda dy: [T.adaptive_avg_pool_backward(dy, caches["a"])], [x], rng) <= 1e-4


def test_fd_check_detects_corrupted_backward():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 5, 5, 3))
    w = rng.standard_normal((3, 3, 3, 2))
    cache = {}

    def conv(x, w):
        y, cache["c"] = T.conv2d_forward(x, w, None, 1, 1)
        return y

    def broken(dy):
        dx, dw, _ = T.conv2d_backward(dy, cache["c"])
        return dx, dw * 1.05

    assert grad_check(conv, broken, [x, w], rng) > 1e-2


def test_fd_check_sum_of_squares():
    x = np.random.default_rng(0).standard_normal(20)
    assert T.finite_diff_check(lambda v: float((v ** 2).sum()), x, 2 * x) <= 1e-7


def test_batch_norm_train_statistics_and_fixed_point():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 5, 3, 6)) * 3 + 2
    y, _ = T.batch_norm_forward(x, np.ones(6), np.zeros(6), np.zeros(6), np.ones(6), True)
    np.testing.assert_allclose(y.mean(axis=(0, 1, 2)), 0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=(0, 1, 2)), 1, atol=1e-5)
    y2, _ = T.batch_norm_forward(y, np.ones(6), np.zeros(6), np.zeros(6), np.ones(6), True)
    np.testing.assert_allclose(y2, y, rtol=1e-5, atol=1e-8)


def test_batch_norm_running_stats_and_eval_mode():
    bn = T.BatchNorm2d("bn", 2, dtype=np.float64)
    x = np.random.default_rng(2).standard_normal((3, 4, 4, 2)) + 5
    bn.forward(x)
    n = x.size // 2
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 1, 2)))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 1, 2)) * n / (n - 1))
    bn.training = False
    y = bn.forward(x)
    expect = (x - bn.running_mean) / np.sqrt(bn.running_var + 1e-5)
    np.testing.assert_allclose(y, expect)


def test_leaky_relu_values_and_slopes():
    y, cache = T.leaky_relu_forward(np.array([1.0, -2.0, -1.0]), 0.01)
    np.testing.assert_allclose(y, [1.0, -0.02, -0.01])
    np.testing.assert_allclose(T.leaky_relu_backward(np.ones(3), cache), [1.0, 0.01, 0.01])


def test_max_pool_values_and_tie_routing():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    y, cache = T.max_pool_2x2_forward(x)
    assert y.item() == 4.0
    dx = T.max_pool_2x2_backward(np.ones_like(y), cache)
    np.testing.assert_array_equal(dx.ravel(), [0, 0, 0, 1])
    y, cache = T.max_pool_2x2_forward(np.full((1, 4, 4, 2), 7.0))
    np.testing.assert_array_equal(y, 7.0)
    dx = T.max_pool_2x2_backward(np.ones_like(y), cache)
    # ties go to the first element of each window
    np.testing.assert_array_equal(dx[0, ::2, ::2], 1.0)
    assert dx.sum() == y.size


def test_adaptive_pool_examples():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 8, 6, 3))
    y, _ = T.adaptive_avg_pool_forward(x, 8, 6)
    np.testing.assert_allclose(y, x)
    y, _ = T.adaptive_avg_pool_forward(x, 4, 6)
    np.testing.assert_allclose(y, 0.5 * (x[:, 0::2] + x[:, 1::2]))
    y, _ = T.adaptive_avg_pool_forward(np.full((1, 5, 7, 2), 3.0), 4, 3)
    np.testing.assert_allclose(y, 3.0)


@given(size=st.integers(1, 40), out=st.integers(1, 12))
def test_adaptive_bins_cover_input(size, out):
    bins = T.adaptive_bins(size, out)
    assert len(bins) == out
    covered = set()
    for a, b in bins:
        assert 0 <= a < b <= size
        covered.update(range(a, b))
    assert covered == set(range(size))


def test_adam_examples():
    p = T.Parameter("w", np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    T.Adam([p], lr=0.1).step()
    np.testing.assert_array_equal(p.value, [1.0, -2.0])
    p = T.Parameter("w", np.array([1.0, -2.0]))
    p.grad = np.array([3.0, -0.5])
    T.Adam([p], lr=0.01).step()
    np.testing.assert_allclose(p.value, [0.99, -1.99], atol=1e-6)
    # quadratic bowl
    p = T.Parameter("x", np.array([1.0]))
    opt = T.Adam([p], lr=0.05)
    for _ in range(200):
        p.grad = 2 * p.value
        opt.step()
    assert abs(p.value[0]) < 0.05


def test_adam_rejects_non_finite_before_update():
    p = T.Parameter("w", np.array([1.0]))
    p.grad = np.array([np.nan])
    with pytest.raises(T.NonFiniteGradientError):
        T.Adam([p]).step()
    assert p.value[0] == 1.0


def test_layers_finite_for_bounded_inputs():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1e3, 1e3, (2, 6, 6, 3))
    w = rng.uniform(-1e3, 1e3, (3, 3, 3, 4))
    y, _ = T.conv2d_forward(x, w, np.zeros(4), 1, 1)
    y, _ = T.batch_norm_forward(y, np.ones(4), np.zeros(4), np.zeros(4), np.ones(4), True)
    y, _ = T.leaky_relu_forward(y)
    y, _ = T.max_pool_2x2_forward(y)
    y, _ = T.adaptive_avg_pool_forward(y, 2, 2)
    assert np.isfinite(y).all()


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 9, 9, 5)).astype(np.float32)
    w = rng.standard_normal((3, 3, 5, 8)).astype(np.float32)
    a, _ = T.conv2d_forward(x, w, None, 1, 1)
    b, _ = T.conv2d_forward(x.copy(), w.copy(), None, 1, 1)
    assert a.tobytes() == b.tobytes()
