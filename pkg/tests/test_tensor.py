import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from msnlab.errors import ArgumentError, ShapeError
from msnlab.gradcheck import check_function, rel_error
from msnlab import tensor as T
from msnlab.tensor import Tensor, backward


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


# matmul

def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_projector():
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
    ref = np.zeros((4, 2))
    for i in range(4):
        for j in range(2):
            for k in range(3):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, ref, rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_matmul_backward_rules(rng):
    a, b = leaf(rng.standard_normal((4, 3))), leaf(rng.standard_normal((3, 2)))
    g = rng.standard_normal((4, 2))
    backward(T.tensor_sum(T.matmul(a, b) * g))
    np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)


# conv2d

def naive_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for a in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                out[a, o, i, j] += xp[a, ch, i * stride + p, j * stride + q] * w[o, ch, p, q]
    return out


def test_conv_scalar_kernel():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_impulse_response_is_flipped_kernel():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 1.0
    k = np.arange(9.0).reshape(1, 1, 3, 3)
    out = T.conv2d(Tensor(x), Tensor(k), 1, 1).data[0, 0]
    np.testing.assert_array_equal(out, k[0, 0, ::-1, ::-1])


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 0)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), stride, pad).data, naive_conv(x, w, stride, pad),
                               rtol=0, atol=1e-10)


def test_conv_floor_geometry():
    assert T.conv2d(Tensor(np.zeros((1, 1, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))), 2, 0).shape == (1, 1, 2, 2)


@pytest.mark.parametrize("stride,pad", [(0, 0), (-1, 0), (1, -1)])
def test_conv_bad_geometry(stride, pad):
    with pytest.raises(ArgumentError):
        T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride, pad)


def test_conv_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    x, w = leaf(rng.uniform(-2, 2, (2, 2, 5, 5))), leaf(rng.uniform(-2, 2, (3, 2, 3, 3)))
    proj = rng.standard_normal((2, 3, 3, 3))
    errs = check_function(lambda: T.tensor_sum(T.conv2d(x, w, 2, 1) * proj), {"x": x, "w": w})
    assert max(errs.values()) <= 1e-3


# leaky_relu

def test_leaky_relu_values():
    np.testing.assert_allclose(T.leaky_relu(Tensor([-1.0, 0.0, 2.0]), 0.01).data, [-0.01, 0.0, 2.0])


def test_leaky_relu_slope_one_is_identity(rng):
    x = rng.standard_normal(7)
    np.testing.assert_array_equal(T.leaky_relu(Tensor(x), 1.0).data, x)


def test_leaky_relu_slope_zero_is_relu():
    x = leaf([-3.0])
    backward(T.tensor_sum(T.leaky_relu(x, 0.0)))
    assert x.grad[0] == 0.0


@pytest.mark.parametrize("slope", [-0.1, 1.5])
def test_leaky_relu_rejects_slope(slope):
    with pytest.raises(ArgumentError):
        T.leaky_relu(Tensor([1.0]), slope)


# reductions

def test_sum_axis0():
    np.testing.assert_array_equal(T.tensor_sum(Tensor([[1.0, 3.0], [5.0, 7.0]]), 0).data, [6, 10])


def test_mean_axis0_and_all():
    np.testing.assert_array_equal(T.reduce_mean(Tensor([[1.0, 3.0], [5.0, 7.0]]), 0).data, [3, 5])
    assert T.reduce_mean(Tensor(np.ones((3, 4, 5)))).data == 1.0


def test_mean_matches_naive_summation(rng):
    x = rng.standard_normal((3, 4, 5))
    ref = np.zeros((4,))
    for j in range(4):
        s = 0.0
        for i in range(3):
            for k in range(5):
                s += x[i, j, k]
        ref[j] = s / 15
    np.testing.assert_allclose(T.reduce_mean(Tensor(x), (0, 2)).data, ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("axes", [3, (0, 0), -4])
def test_reduction_bad_axes(axes):
    with pytest.raises(ArgumentError):
        T.tensor_sum(Tensor(np.zeros((2, 3, 4))), axes)


# backward engine

def test_grad_of_sum_is_ones(rng):
    x = leaf(rng.standard_normal((2, 3, 4)))
    backward(T.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_grad_of_sum_of_squares():
    x = leaf([1.0, -2.0])
    backward(T.tensor_sum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, -4.0])


def test_backward_requires_scalar():
    with pytest.raises(ArgumentError):
        backward(leaf([1.0, 2.0]) * 2.0)


def test_grads_accumulate_across_calls():
    x = leaf([1.0, 2.0])
    backward(T.tensor_sum(x * 3.0))
    backward(T.tensor_sum(x * 3.0))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_shared_subexpression_counts_twice():
    x = leaf([2.0])
    y = x * x
    backward(T.tensor_sum(y + y))
    np.testing.assert_array_equal(x.grad, [8.0])


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    x = rng.uniform(-2, 2, (5, 4))
    ws = [leaf(rng.uniform(-1, 1, s)) for s in ((4, 6), (6, 5), (5, 3))]
    bs = [leaf(rng.uniform(-1, 1, s[1])) for s in ((4, 6), (6, 5), (5, 3))]
    labels = np.array([0, 2, 1, 1, 0])

    def loss():
        h = Tensor(x)
        for i, (w, b) in enumerate(zip(ws, bs)):
            h = T.matmul(h, w) + b
            if i < 2:
                h = T.leaky_relu(h, 0.1)
        return T.cross_entropy(h, labels)

    params = {f"w{i}": w for i, w in enumerate(ws)} | {f"b{i}": b for i, b in enumerate(bs)}
    assert max(check_function(loss, params).values()) <= 1e-3


def test_cross_entropy_matches_direct_formula(rng):
    z = rng.standard_normal((4, 3)) * 5
    y = np.array([0, 2, 1, 2])
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    ref = -np.mean(np.log(p[np.arange(4), y]))
    assert abs(float(T.cross_entropy(Tensor(z), y).data) - ref) < 1e-12


def test_cross_entropy_stable_for_huge_logits():
    out = T.cross_entropy(Tensor([[1000.0, 0.0]]), np.array([0]))
    assert np.isfinite(out.data) and abs(float(out.data)) < 1e-12


def test_getitem_and_concat_backward(rng):
    a, b = leaf(rng.standard_normal((2, 3))), leaf(rng.standard_normal((1, 3)))
    c = T.concat([a, b])
    backward(T.tensor_sum(c[1:] * 2.0))
    np.testing.assert_array_equal(a.grad, [[0, 0, 0], [2, 2, 2]])
    np.testing.assert_array_equal(b.grad, [[2, 2, 2]])


# properties

UNARY = {
    "exp": T.exp,
    "sigmoid": T.sigmoid,
    "leaky": lambda t: T.leaky_relu(t, 0.2),
    "square": lambda t: t * t,
    "sqrt_shifted": lambda t: T.sqrt(t * t + 1.0),
    "log_shifted": lambda t: T.log(t * t + 0.5),
    "div": lambda t: 1.0 / (t * t + 1.0),
}

small = arrays(np.float64, st.integers(1, 6), elements=st.floats(-2, 2))


@settings(max_examples=30, deadline=None)
@given(x=small, name=st.sampled_from(sorted(UNARY)))
def test_unary_gradients_match_finite_differences(x, name):
    if name == "leaky":
        # finite differences straddle the kink
        x = np.where(np.abs(x) < 1e-4, 0.5, x)
    t = leaf(x)
    errs = check_function(lambda: T.tensor_sum(UNARY[name](t)), {"x": t})
    assert errs["x"] <= 1e-3


@settings(max_examples=30, deadline=None)
@given(x=arrays(np.float64, (3, 4), elements=st.floats(-2, 2)),
       a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_backward_is_linear(x, a, b):
    def grad_of(fn):
        t = leaf(x)
        backward(fn(t))
        return t.grad

    f = lambda t: T.tensor_sum(T.sigmoid(t) * t)
    g = lambda t: T.reduce_mean(T.exp(t * 0.3))
    combined = grad_of(lambda t: f(t) * a + g(t) * b)
    np.testing.assert_allclose(combined, a * grad_of(f) + b * grad_of(g), rtol=0, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(shape=st.sampled_from([(3, 1), (1, 4), (4,), ()]))
def test_broadcast_grads_reduce_to_operand_shape(shape):
    a = leaf(np.ones((3, 4)))
    b = leaf(np.full(shape, 2.0))
    backward(T.tensor_sum(a * b))
    assert b.grad.shape == b.shape
    assert b.grad.sum() == pytest.approx(12.0)


def test_forward_is_deterministic():
    def run():
        r = np.random.default_rng(2)
        x, w = r.standard_normal((2, 3, 7, 7)), r.standard_normal((4, 3, 3, 3))
        return T.conv2d(Tensor(x), Tensor(w), 2, 1).data.tobytes()
    assert run() == run()


def test_rel_error_floor():
    assert rel_error(0.0, 0.0) == 0.0
    assert rel_error(1e-9, 0.0) == pytest.approx(0.1)
