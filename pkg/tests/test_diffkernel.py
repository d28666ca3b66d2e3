import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from g2d.diffkernel import Graph, GraphError, Parameter, ShapeError, grad_check, softmax
from oracles import conv2d_loops


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv2d_matches_loops_exactly_on_integers(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.integers(-4, 5, size=(2, 3, 7, 6)).astype(float)
    k = rng.integers(-3, 4, size=(4, 3, 3, 3)).astype(float)
    b = rng.integers(-2, 3, size=4).astype(float)
    out = Graph().conv2d(x, Parameter("k", k), Parameter("b", b), stride, pad).value
    ref = np.array(conv2d_loops(x.tolist(), k.tolist(), b.tolist(), stride, pad))
    assert out.shape == ref.shape
    assert np.array_equal(out, ref)


def test_conv2d_rejects_oversized_kernel():
    with pytest.raises(ShapeError):
        Graph().conv2d(np.zeros((1, 1, 2, 2)), Parameter("k", np.zeros((1, 1, 3, 3))))


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        Graph().conv2d(np.zeros((1, 2, 4, 4)), Parameter("k", np.zeros((1, 3, 3, 3))))


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        Graph().linear(np.zeros((2, 3)), Parameter("w", np.zeros((4, 2))))


def test_backward_twice_is_an_error():
    g = Graph()
    w = Parameter("w", np.ones(3))
    loss = g.sum(g.mul_const(g.param(w), np.arange(3.0)))
    g.backward(loss)
    with pytest.raises(GraphError):
        g.backward(loss)


def test_backward_on_foreign_node_is_an_error():
    g, h = Graph(), Graph()
    node = h.sum(h.input(np.ones(2), requires_grad=True))
    with pytest.raises(GraphError):
        g.backward(node)


def test_nonscalar_loss_rejected():
    g = Graph()
    with pytest.raises(ShapeError):
        g.backward(g.relu(g.input(np.ones(3), requires_grad=True)))


def test_parameter_gradients_accumulate_and_frozen_are_skipped():
    w = Parameter("w", np.array([2.0, -1.0]))
    frozen = Parameter("f", np.array([5.0, 5.0]), trainable=False)
    for _ in range(2):
        g = Graph()
        g.backward(g.combine([(g.sum(g.param(w)), 3.0), (g.sum(g.param(frozen)), 1.0)]))
    assert np.array_equal(w.grad, [6.0, 6.0])
    assert np.array_equal(frozen.grad, [0.0, 0.0])


def test_nonfinite_values_raise():
    g = Graph()
    with pytest.raises(FloatingPointError):
        g.input(np.array([np.inf]))


def test_linear_gradient_by_hand():
    # d/dx sum(x W) = row sums of W
    w = Parameter("w", np.array([[1.0, 2.0], [3.0, 4.0]]))
    g = Graph()
    x = g.input(np.ones((1, 2)), requires_grad=True)
    g.backward(g.sum(g.linear(x, w)))
    assert np.array_equal(g.grad(x), [[3.0, 7.0]])
    assert np.array_equal(w.grad, [[1.0, 1.0], [1.0, 1.0]])


def test_upsample_and_mean_pool_values():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    up = Graph().upsample2x(x).value
    assert up.shape == (1, 1, 4, 4)
    assert np.array_equal(up[0, 0, :2, :2], np.zeros((2, 2)))
    assert Graph().mean_pool(x).value.tolist() == [[1.5]]


def test_softmax_rows_sum_to_one():
    z = np.random.default_rng(0).normal(size=(5, 7)) * 30
    assert np.allclose(softmax(z).sum(axis=1), 1.0, atol=1e-12)


def test_grad_check_detects_a_wrong_gradient():
    def build(g, x):
        y = g.sigmoid(x)
        bad = g.custom("bad", [y], y.value, lambda gr: [gr * 1.1])
        return g.sum(bad)
    err = grad_check(build, np.random.default_rng(0).normal(size=(3, 3)))
    assert err > 1e-3


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv2d_gradients(stride, pad):
    rng = np.random.default_rng(stride + 7 * pad)
    k = Parameter("k", rng.normal(size=(3, 2, 3, 3)))
    r = rng.normal(size=(2, 3) + ((7 + 2 * pad - 3) // stride + 1,) * 2)

    def build(g, x):
        return g.sum(g.mul_const(g.conv2d(x, k, None, stride, pad), r))
    assert grad_check(build, rng.normal(size=(2, 2, 7, 7))) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_linear_relu_gradients_property(b, d_in, d_out, seed):
    rng = np.random.default_rng(seed)
    w = Parameter("w", rng.normal(size=(d_in, d_out)))
    bias = Parameter("b", rng.normal(size=d_out))
    r = rng.normal(size=(b, d_out))

    def build(g, x):
        return g.sum(g.mul_const(g.sigmoid(g.linear(x, w, bias)), r))
    assert grad_check(build, rng.normal(size=(b, d_in))) <= 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_residual_block_gradients_property(seed):
    rng = np.random.default_rng(seed)
    k1 = Parameter("k1", rng.normal(size=(2, 2, 3, 3)) * 0.5)
    k2 = Parameter("k2", rng.normal(size=(2, 2, 3, 3)) * 0.5)

    def build(g, x):
        h = g.relu(g.conv2d(x, k1, pad=1))
        return g.mean(g.sigmoid(g.residual_add(x, g.conv2d(h, k2, pad=1))))
    assert grad_check(build, rng.normal(size=(1, 2, 4, 4))) <= 1e-6
