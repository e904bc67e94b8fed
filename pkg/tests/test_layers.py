import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, conv_loops, maxpool_loops
from weathercnn.errors import ShapeError, StateError, ValidationError
from weathercnn.layers import (ActivationSpec, Conv2D, ConvSpec, Dense, FcSpec, Logistic, MaxPool2D,
                               PoolSpec, ReLU, conv2d_input_grad, conv2d_valid, conv2d_weight_grad,
                               cross_entropy_loss, logistic, relu, relu_backward)
from weathercnn.numerics import Rng


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


# -- specs ---------------------------------------------------------------------

@pytest.mark.parametrize("make", [
    lambda: ConvSpec(0, 3, 2), lambda: ConvSpec(3, 3, 0), lambda: PoolSpec(0, 2),
    lambda: FcSpec(0), lambda: ActivationSpec("tanh"),
])
def test_spec_validation(make):
    with pytest.raises(ValueError):
        make()


# -- convolution ---------------------------------------------------------------

def test_conv_degenerate_window():
    layer = Conv2D(ConvSpec(1, 1, 1), 1, weight=[[[[2.0]]]], bias=[0.5])
    out = layer.forward(np.array([[[3.0]]]))
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 2.0 * 3.0 + 0.5
    grad_in, grads = layer.backward(np.ones((1, 1, 1)))
    assert grads["weight"].item() == 3.0
    assert grads["bias"].item() == 1.0
    assert grad_in.item() == 2.0


def test_conv_hand_case():
    x = np.arange(1, 10, dtype=float).reshape(1, 3, 3)
    layer = Conv2D(ConvSpec(2, 2, 1), 1, weight=np.ones((1, 1, 2, 2)))
    assert np.array_equal(layer.forward(x)[0], [[12.0, 16.0], [24.0, 28.0]])


def test_conv_tc_first_layer_shape(rng):
    layer = Conv2D(ConvSpec(5, 5, 8), 8)
    layer.init(rng)
    assert layer.forward(np.zeros((8, 32, 32))).shape == (8, 28, 28)


@pytest.mark.parametrize("method", ["im2col", "fft"])
def test_conv_matches_loop_oracle(method, np_rng):
    for _ in range(10):
        c, k = np_rng.integers(1, 5), np_rng.integers(1, 9)
        h, w = np_rng.integers(4, 17, size=2)
        fh, fw = np_rng.integers(1, h + 1), np_rng.integers(1, w + 1)
        x = np_rng.normal(size=(c, h, w))
        wt = np_rng.normal(size=(k, c, fh, fw))
        b = np_rng.normal(size=k)
        got = conv2d_valid(x[None], wt, b, method)[0]
        assert np.max(np.abs(got - conv_loops(x, wt, b))) < 1e-9


@pytest.mark.parametrize("method", ["im2col", "fft"])
def test_conv_kernels_finite_differences(method, np_rng):
    x = np_rng.normal(size=(2, 2, 6, 7))
    w = np_rng.normal(size=(3, 2, 5, 4))
    g = np_rng.normal(size=(2, 3, 2, 4))

    def loss_w(wv):
        return float(np.sum(conv2d_valid(x, wv, None, method) * g))

    def loss_x(xv):
        return float(np.sum(conv2d_valid(xv, w, None, method) * g))

    assert rel_err(conv2d_weight_grad(x, g, 5, 4, method), central_difference(loss_w, w, 1e-5)) < 1e-5
    assert rel_err(conv2d_input_grad(g, w, method), central_difference(loss_x, x, 1e-5)) < 1e-5


def test_conv_layer_finite_differences(np_rng):
    layer = Conv2D(ConvSpec(5, 5, 3), 2)
    layer.init(Rng(4))
    layer.params["bias"][:] = np_rng.normal(size=3)
    x = np_rng.normal(size=(2, 6, 6))
    g = np_rng.normal(size=(3, 2, 2))
    layer.forward(x)
    grad_in, grads = layer.backward(g)

    def f_param(name):
        def f(v):
            old = layer.params[name]
            layer.params[name] = v
            out = float(np.sum(layer.forward(x) * g))
            layer.params[name] = old
            return out
        return f

    assert rel_err(grads["weight"], central_difference(f_param("weight"), layer.params["weight"], 1e-5)) < 1e-5
    assert rel_err(grads["bias"], central_difference(f_param("bias"), layer.params["bias"], 1e-5)) < 1e-5
    fx = central_difference(lambda v: float(np.sum(layer.forward(v) * g)), x, 1e-5)
    assert rel_err(grad_in, fx) < 1e-5


def test_conv_zero_grad_out(np_rng):
    layer = Conv2D(ConvSpec(3, 3, 2), 2)
    layer.init(Rng(1))
    layer.forward(np_rng.normal(size=(2, 5, 5)))
    grad_in, grads = layer.backward(np.zeros((2, 3, 3)))
    assert not grad_in.any() and not grads["weight"].any() and not grads["bias"].any()


def test_conv_errors():
    layer = Conv2D(ConvSpec(3, 3, 2), 2)
    with pytest.raises(ShapeError):
        layer.forward(np.zeros((3, 5, 5)))
    with pytest.raises(ShapeError):
        layer.forward(np.zeros((2, 2, 5)))
    with pytest.raises(StateError):
        layer.backward(np.zeros((2, 3, 3)))


def test_fft_and_im2col_agree_on_large_filters(np_rng):
    x = np_rng.normal(size=(2, 2, 40, 50))
    w = np_rng.normal(size=(4, 2, 12, 12))
    a = conv2d_valid(x, w, None, "im2col")
    b = conv2d_valid(x, w, None, "fft")
    assert np.max(np.abs(a - b)) < 1e-10 * np.max(np.abs(a))


# -- pooling -------------------------------------------------------------------

def test_pool_basic():
    layer = MaxPool2D(PoolSpec(2, 2))
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    assert layer.forward(x).tolist() == [[[4.0]]]
    grad_in, _ = layer.backward(np.array([[[5.0]]]))
    assert grad_in.tolist() == [[[0.0, 0.0], [0.0, 5.0]]]


def test_pool_floor_drops_remainder(np_rng):
    layer = MaxPool2D(PoolSpec(2, 2))
    x = np_rng.normal(size=(1, 5, 5))
    out = layer.forward(x)
    assert out.shape == (1, 2, 2)
    assert np.array_equal(out, maxpool_loops(x, 2, 2))
    grad_in, _ = layer.backward(np.ones((1, 2, 2)))
    assert not grad_in[:, 4, :].any() and not grad_in[:, :, 4].any()


def test_pool_ties_pick_top_left():
    layer = MaxPool2D(PoolSpec(2, 3))
    layer.forward(np.full((2, 4, 6), 7.0))
    grad_in, _ = layer.backward(np.ones((2, 2, 2)))
    expected = np.zeros((4, 6))
    expected[0, 0] = expected[0, 3] = expected[2, 0] = expected[2, 3] = 1.0
    assert np.array_equal(grad_in[0], expected)


def test_pool_window_too_large():
    with pytest.raises(ShapeError):
        MaxPool2D(PoolSpec(3, 3)).forward(np.zeros((1, 2, 5)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 9), st.integers(1, 9), st.integers(1, 3), st.integers(1, 3),
       st.integers(0, 2**32))
def test_pool_gradient_conservation(c, h, w, s, t, seed):
    if s > h or t > w:
        return
    rng = np.random.default_rng(seed)
    layer = MaxPool2D(PoolSpec(s, t))
    out = layer.forward(rng.normal(size=(c, h, w)))
    g = rng.normal(size=out.shape)
    grad_in, _ = layer.backward(g)
    # every upstream value lands on exactly one input position
    assert np.array_equal(np.sort(grad_in[grad_in != 0]), np.sort(g[g != 0]))
    assert np.count_nonzero(grad_in) == np.count_nonzero(g)


def test_pool_finite_differences(np_rng):
    layer = MaxPool2D(PoolSpec(2, 2))
    x = np_rng.normal(size=(3, 8, 8))  # continuous values: no ties
    g = np_rng.normal(size=(3, 4, 4))
    layer.forward(x)
    grad_in, _ = layer.backward(g)
    fd = central_difference(lambda v: float(np.sum(layer.forward(v) * g)), x, 1e-5)
    assert rel_err(grad_in, fd) < 1e-5


# -- dense ---------------------------------------------------------------------

def test_dense_identity_and_matvec():
    layer = Dense(FcSpec(3), 3, weight=np.eye(3))
    x = np.array([1.0, -2.0, 5.0])
    assert np.array_equal(layer.forward(x), x)
    layer = Dense(FcSpec(2), 2, weight=[[1, 2], [3, 4]], bias=[0, 0])
    assert layer.forward(np.array([1.0, 1.0])).tolist() == [3.0, 7.0]


def test_dense_finite_differences(np_rng):
    layer = Dense(FcSpec(5), 10)
    layer.init(Rng(3))
    layer.params["bias"][:] = np_rng.normal(size=5)
    x = np_rng.normal(size=10)
    g = np_rng.normal(size=5)
    layer.forward(x)
    grad_in, grads = layer.backward(g)
    w0 = layer.params["weight"].copy()

    def f_w(v):
        layer.params["weight"] = v
        out = float(layer.forward(x) @ g)
        layer.params["weight"] = w0
        return out

    assert rel_err(grads["weight"], central_difference(f_w, w0, 1e-5)) < 1e-6
    assert rel_err(grads["bias"], g) < 1e-12
    assert rel_err(grad_in, central_difference(lambda v: float(layer.forward(v) @ g), x, 1e-5)) < 1e-6


def test_dense_shape_error():
    with pytest.raises(ShapeError):
        Dense(FcSpec(2), 4).forward(np.zeros(5))


# -- activations and loss ------------------------------------------------------

def test_relu_examples():
    assert relu([-2.0, 0.0, 3.0]).tolist() == [0.0, 0.0, 3.0]
    assert relu_backward([-1.0, 2.0], [5.0, 7.0]).tolist() == [0.0, 7.0]
    assert relu_backward([0.0], [5.0]).tolist() == [0.0]
    layer = ReLU()
    layer.forward(np.array([1.0, -1.0]))
    assert layer.backward(np.array([3.0, 3.0]))[0].tolist() == [3.0, 0.0]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30))
def test_relu_idempotent(xs):
    x = np.array(xs)
    assert np.array_equal(relu(relu(x)), relu(x))
    assert np.all(relu(x) >= 0)


def test_logistic_examples():
    assert logistic(np.array([0.0]))[0] == 0.5
    v = logistic(np.array([-1000.0]))[0]
    assert 0.0 < v <= 1e-300
    assert logistic(np.array([1000.0]))[0] < 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-700, 700), min_size=1, max_size=30))
def test_logistic_symmetry(xs):
    x = np.array(xs)
    p = logistic(x)
    assert np.all((p > 0) & (p < 1))
    assert np.max(np.abs(p + logistic(-x) - 1.0)) < 1e-12


def test_logistic_layer_backward(np_rng):
    layer = Logistic()
    x = np_rng.normal(size=4)
    g = np_rng.normal(size=4)
    layer.forward(x)
    fd = central_difference(lambda v: float(logistic(v) @ g), x, 1e-6)
    assert rel_err(layer.backward(g)[0], fd) < 1e-7


def test_cross_entropy_values():
    loss, grad = cross_entropy_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
    assert abs(loss - np.log(2.0)) < 1e-15
    assert grad.tolist() == [-0.25, 0.25]
    loss, _ = cross_entropy_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
    assert 0.0 <= loss < 1e-10


def test_cross_entropy_fused_gradient(np_rng):
    z = np_rng.normal(size=2)
    t = np.array([0.0, 1.0])
    _, grad = cross_entropy_loss(logistic(z), t)
    fd = central_difference(lambda v: cross_entropy_loss(logistic(v), t)[0], z, 1e-6)
    assert rel_err(grad, fd) < 1e-7


def test_cross_entropy_batch_averages(np_rng):
    p = logistic(np_rng.normal(size=(3, 2)))
    t = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    loss, grad = cross_entropy_loss(p, t)
    singles = [cross_entropy_loss(p[i], t[i]) for i in range(3)]
    assert abs(loss - np.mean([s[0] for s in singles])) < 1e-15
    assert np.allclose(grad, np.stack([s[1] for s in singles]) / 3, rtol=0, atol=1e-16)


@pytest.mark.parametrize("target", [[1.0, 1.0], [0.0, 0.0], [0.5, 0.5], [1.0, 0.0, 0.0]])
def test_cross_entropy_rejects_bad_targets(target):
    with pytest.raises(ValidationError):
        cross_entropy_loss(np.array([0.3, 0.7]), np.array(target))


def test_forward_is_pure(np_rng):
    layer = Conv2D(ConvSpec(3, 3, 4), 2)
    layer.init(Rng(2))
    x = np_rng.normal(size=(2, 9, 9))
    assert np.array_equal(layer.forward(x), layer.forward(x))
