import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvalign import kernels
from mvalign import tensor as T
from mvalign.gradcheck import gradcheck
from mvalign.optim import SGD, NonFiniteGradient, sgd_step


def leaf(a):
    return T.Tensor(a, requires_grad=True)


def conv_loop(x, w, stride, pad):
    c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for cc in range(ci):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[cc, i * stride + a, j * stride + b] * w[o, cc, a, b]
                out[o, i, j] = acc
    return out


def test_identity_kernel_copies_input():
    x = np.random.default_rng(0).standard_normal((3, 5, 7))
    w = np.eye(3)[:, :, None, None]
    assert np.array_equal(T.conv2d(T.Tensor(x), T.Tensor(w)).data, x)


def test_stem_shape():
    x = T.Tensor(np.zeros((3, 256, 256)))
    w = T.Tensor(np.zeros((64, 3, 7, 7)))
    assert T.conv2d(x, w, stride=2, padding=3).shape == (64, 128, 128)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 5, 5))
    w = rng.standard_normal((1, 1, 3, 3))
    np.testing.assert_allclose(T.conv2d(T.Tensor(x), T.Tensor(w)).data, conv_loop(x, w, 1, 0), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 8), st.integers(1, 3), st.integers(0, 2),
       st.integers(0, 10_000))
def test_conv_shape_rule_and_values(cin, cout, side, stride, pad, seed):
    k = 3
    if side + 2 * pad < k:
        return
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((cin, side, side))
    w = rng.standard_normal((cout, cin, k, k))
    out = T.conv2d(T.Tensor(x), T.Tensor(w), stride=stride, padding=pad).data
    ho = (side + 2 * pad - k) // stride + 1
    assert out.shape == (cout, ho, ho)
    np.testing.assert_allclose(out, conv_loop(x, w, stride, pad), atol=1e-10)


def test_conv_channel_mismatch():
    with pytest.raises(T.ShapeError):
        T.conv2d(T.Tensor(np.zeros((2, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3))))


def test_maxpool_examples():
    assert T.maxpool2(T.Tensor([[[1.0, 2.0], [3.0, 4.0]]])).data.tolist() == [[[4.0]]]
    np.testing.assert_array_equal(T.maxpool2(T.Tensor(np.full((2, 4, 6), 3.5))).data, np.full((2, 2, 3), 3.5))
    with pytest.raises(T.ShapeError):
        T.maxpool2(T.Tensor(np.zeros((1, 3, 4))))


def test_maxpool_tie_goes_to_first_cell():
    x = leaf(np.ones((1, 2, 2)))
    T.tsum(T.maxpool2(x)).backward()
    assert x.grad.tolist() == [[[1.0, 0.0], [0.0, 0.0]]]


def test_maxpool_gradcheck():
    x = leaf(np.random.default_rng(2).standard_normal((4, 8, 8)))
    w = np.random.default_rng(3).standard_normal((4, 4, 4))
    assert gradcheck(lambda: T.tsum(T.maxpool2(x) * w), [x]).passed()


def test_batchnorm_normalises_each_channel():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 5, 5)) * 3 + 1
    y = T.batchnorm(T.Tensor(x), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3))).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_batchnorm_constant_channel_gives_beta():
    x = np.full((1, 2, 4, 4), 7.0)
    y = T.batchnorm(T.Tensor(x), T.Tensor([2.0, 3.0]), T.Tensor([0.5, -1.0])).data
    np.testing.assert_allclose(y[0, 0], 0.5)
    np.testing.assert_allclose(y[0, 1], -1.0)


def test_batchnorm_running_stats_used_in_eval():
    rng = np.random.default_rng(5)
    rm, rv = np.zeros(2), np.ones(2)
    x = rng.standard_normal((4, 2, 3, 3)) + 2.0
    T.batchnorm(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), running_mean=rm, running_var=rv,
                momentum=1.0)
    np.testing.assert_allclose(rm, x.mean(axis=(0, 2, 3)))
    y = T.batchnorm(T.Tensor(x[:1]), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), running_mean=rm,
                    running_var=rv, training=False).data
    np.testing.assert_allclose(y, (x[:1] - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5))


def test_batchnorm_gradcheck_single_image():
    rng = np.random.default_rng(6)
    x, g, b = leaf(rng.standard_normal((2, 4, 4))), leaf(rng.uniform(0.5, 1.5, 2)), leaf(rng.standard_normal(2))
    w = rng.standard_normal((2, 4, 4))
    assert gradcheck(lambda: T.tsum(T.square(T.batchnorm(x, g, b)) * w), [x, g, b]).passed()


def test_small_definitions():
    assert T.relu(T.Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert T.softmax(T.Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]
    assert T.smooth_l1(T.Tensor([0.0, 0.5, 2.0, -2.0])).data.tolist() == [0.0, 0.125, 1.5, 1.5]


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(vals):
    s = T.softmax(T.Tensor(np.array([vals, vals[::-1]]))).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(s >= 0)


def test_smooth_l1_derivative_continuous_at_knee():
    x = leaf([-1.0, 1.0, -1.0 + 1e-9, 1.0 - 1e-9])
    T.tsum(T.smooth_l1(x)).backward()
    np.testing.assert_allclose(x.grad, [-1.0, 1.0, -1.0, 1.0], atol=1e-8)
    y = leaf(np.linspace(-1.3, 1.3, 11))
    assert gradcheck(lambda: T.tsum(T.smooth_l1(y)), [y]).passed()


def test_fully_connected_gradcheck():
    rng = np.random.default_rng(7)
    x, w, b = leaf(rng.standard_normal((3, 8))), leaf(rng.standard_normal((4, 8))), leaf(rng.standard_normal(4))
    c = rng.standard_normal((3, 4))
    assert gradcheck(lambda: T.tsum(T.fully_connected(x, w, b) * c), [x, w, b]).passed()


def test_backward_twice_is_an_error():
    x = leaf([1.0, 2.0])
    y = T.tsum(T.square(x))
    y.backward()
    with pytest.raises(T.GraphError):
        y.backward()


def test_shared_node_visited_once():
    x = leaf([3.0])
    h = T.square(x)
    y = T.tsum(h + h * 2.0)
    y.backward()
    assert x.grad.tolist() == [18.0]


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = T.square(x)
    assert y.is_leaf and not y.requires_grad


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_forward_ops_stay_finite(seed):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.standard_normal((1, 2, 4, 4)) * 10)
    y = T.batchnorm(T.relu(T.conv2d(x, T.Tensor(rng.standard_normal((3, 2, 3, 3))), padding=1)),
                    T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)))
    z = T.log_softmax(T.reshape(T.upsample2(T.maxpool2(y)), (1, -1)))
    assert np.all(np.isfinite(z.data))
    assert np.prod(z.shape) == z.data.size


def test_sgd_examples():
    w = leaf([1.0])
    opt = SGD([w], lr=0.1)
    w.grad = 2 * w.data
    opt.step()
    np.testing.assert_allclose(w.data, [0.8])
    w.grad = np.zeros(1)
    opt.step()
    np.testing.assert_allclose(w.data, [0.8])


def test_sgd_converges_on_quadratic():
    target = np.array([1.5, -2.0])
    scale = np.array([1.0, 3.0])
    w = leaf([0.0, 0.0])
    opt = SGD([w], lr=0.1, momentum=0.5)
    for _ in range(50):
        w.grad = 2 * scale * (w.data - target)
        opt.step()
    assert np.sum(scale * (w.data - target) ** 2) < 1e-6


def test_nan_gradient_rejected():
    w = leaf([1.0, 2.0])
    with pytest.raises(NonFiniteGradient):
        sgd_step([w], [np.array([np.nan, 0.0])], lr=0.1)
    assert w.data.tolist() == [1.0, 2.0]


# the numba kernels and their numpy fallbacks must agree exactly

def test_kernel_paths_agree():
    rng = np.random.default_rng(8)
    xp = rng.standard_normal((2, 3, 9, 9))
    for stride in (1, 2):
        cols_a = kernels._im2col_numba(xp, 3, 3, stride)
        cols_b = kernels._im2col_numpy(xp, 3, 3, stride)
        np.testing.assert_array_equal(cols_a, cols_b)
        d = rng.standard_normal(cols_a.shape)
        np.testing.assert_allclose(kernels._col2im_numba(d, xp.shape, 3, 3, stride),
                                   kernels._col2im_numpy(d, xp.shape, 3, 3, stride), atol=1e-12)
    x = rng.standard_normal((2, 3, 8, 6))
    x[0, 0, :2, :2] = 1.0
    (oa, aa), (ob, ab) = kernels._maxpool2_numba(x), kernels._maxpool2_numpy(x)
    np.testing.assert_array_equal(oa, ob)
    np.testing.assert_array_equal(aa, ab)
    g = rng.standard_normal(oa.shape)
    np.testing.assert_array_equal(kernels._maxpool2_backward_numba(g, aa), kernels._maxpool2_backward_numpy(g, ab))
    img = rng.uniform(0, 1, (3, 10, 12))
    xs, ys = rng.uniform(-2, 13, (5, 7)), rng.uniform(-2, 11, (5, 7))
    np.testing.assert_allclose(kernels._bilinear_numba(img, xs, ys), kernels._bilinear_numpy(img, xs, ys), atol=1e-14)
    boxes = np.column_stack([rng.uniform(0, 50, (40, 2)), rng.uniform(55, 90, (40, 2))])[:, [0, 1, 2, 3]]
    np.testing.assert_array_equal(kernels._nms_sorted_numba(boxes, 0.3), kernels._nms_sorted_numpy(boxes, 0.3))
    cy, cx = rng.integers(-5, 40, 6), rng.integers(-5, 40, 6)
    np.testing.assert_array_equal(kernels._patches_numba(img, cy, cx, 4), kernels._patches_numpy(img, cy, cx, 4))


def test_gradcheck_steps_around_a_kink():
    x = leaf([3e-6, -1.0, 2.0])
    res = gradcheck(lambda: T.tsum(T.relu(x) * np.array([1.0, 2.0, 3.0])), [x], h=1e-5)
    assert res.passed(), res.errors
