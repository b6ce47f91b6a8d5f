import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_difference, naive_conv2d, naive_maxpool2
from palmseg.errors import DimensionError
from palmseg.tensor import (
    Tensor,
    concat_channels,
    conv2d,
    execution_order,
    maxpool2,
    no_grad,
    precision,
    relu,
    sigmoid,
    softmax_spatial,
    upsample2,
)


def test_conv_1x1_scaling():
    x = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, Tensor([[[[2.0]]]]), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_identity_kernel():
    x = Tensor(np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3))
    k = np.zeros((1, 1, 3, 3), dtype=np.float32)
    k[0, 0, 1, 1] = 1
    out = conv2d(x, Tensor(k), Tensor([0.0]), padding=1)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_matches_loop_oracle(rng):
    with precision(np.float64):
        x = rng.standard_normal((2, 3, 5, 5))
        k = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=1, padding=1).data
    np.testing.assert_allclose(out, naive_conv2d(x, k, b, 1, 1), rtol=1e-5, atol=1e-12)


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (2, 1, 3), (2, 0, 1), (3, 2, 5)])
def test_conv_backward_matches_finite_differences(rng, stride, padding, k):
    with precision(np.float64):
        x = rng.standard_normal((2, 2, 6, 6))
        w = rng.standard_normal((3, 2, k, k))
        b = rng.standard_normal(3)
        probe = rng.standard_normal(conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).shape)
        tx, tw, tb = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)
        (conv2d(tx, tw, tb, stride, padding) * Tensor(probe)).sum().backward()

        def f(xx=x, ww=w, bb=b):
            return float((naive_conv2d(xx, ww, bb, stride, padding) * probe).sum())

        np.testing.assert_allclose(tx.grad, central_difference(lambda a: f(xx=a), x.copy()), rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(tw.grad, central_difference(lambda a: f(ww=a), w.copy()), rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(tb.grad, central_difference(lambda a: f(bb=a), b.copy()), rtol=1e-5, atol=1e-7)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError, match="channels"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_rejects_even_kernel_and_small_input():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


def test_relu_values_and_gradient():
    x = Tensor([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu(x).data, [0, 0, 2])
    np.testing.assert_array_equal(relu(Tensor(-np.ones(5))).data, np.zeros(5))
    with precision(np.float64):
        x = Tensor([-1.0, 2.0], requires_grad=True)
        relu(x).backward(np.ones(2))
        fd = central_difference(lambda a: float(np.maximum(a, 0).sum()), np.array([-1.0, 2.0]))
    np.testing.assert_allclose(x.grad, fd)
    np.testing.assert_array_equal(x.grad, [0, 1])


def test_sigmoid():
    assert sigmoid(Tensor(0.0)).item() == 0.5
    with np.errstate(over="raise", invalid="raise"):
        v = sigmoid(Tensor([-1000.0, 1000.0])).data
    assert v[0] < 1e-6 and v[1] == 1.0
    with precision(np.float64):
        x = Tensor(0.0, requires_grad=True)
        sigmoid(x).backward()
    assert x.grad == pytest.approx(0.25)


def test_softmax_spatial_examples(rng):
    out = softmax_spatial(Tensor(np.full((1, 1, 4, 4), 3.0))).data
    np.testing.assert_allclose(out, 1 / 16, rtol=1e-6)
    spike = np.zeros((1, 1, 3, 3))
    spike[0, 0, 1, 2] = 1000
    assert softmax_spatial(Tensor(spike)).data[0, 0, 1, 2] == pytest.approx(1.0)
    with precision(np.float64):
        s = softmax_spatial(Tensor(rng.standard_normal((2, 1, 3, 3)))).data
    np.testing.assert_allclose(s.reshape(2, -1).sum(axis=1), 1.0, atol=1e-6)


def test_softmax_requires_single_channel():
    with pytest.raises(DimensionError):
        softmax_spatial(Tensor(np.zeros((1, 2, 3, 3))))


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 3),
    st.integers(1, 5),
    st.integers(1, 5),
    st.floats(-50, 50),
    st.integers(0, 2**31 - 1),
)
def test_softmax_sums_to_one_and_is_shift_invariant(n, h, w, shift, seed):
    with precision(np.float64):
        x = np.random.default_rng(seed).standard_normal((n, 1, h, w)) * 5
        a = softmax_spatial(Tensor(x)).data
        b = softmax_spatial(Tensor(x + shift)).data
    np.testing.assert_allclose(a.reshape(n, -1).sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_maxpool_examples(rng):
    out = maxpool2(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]))
    np.testing.assert_array_equal(out.data, [[[[4.0]]]])

    x = Tensor(np.full((1, 1, 2, 2), 7.0), requires_grad=True)
    maxpool2(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [[[[1, 0], [0, 0]]]])

    with precision(np.float64):
        v = rng.standard_normal((1, 2, 4, 4))
        np.testing.assert_array_equal(maxpool2(Tensor(v)).data, naive_maxpool2(v))


def test_maxpool_odd_extent():
    with pytest.raises(DimensionError):
        maxpool2(Tensor(np.zeros((1, 1, 3, 4))))


def test_upsample():
    np.testing.assert_array_equal(upsample2(Tensor([[[[5.0]]]])).data, np.full((1, 1, 2, 2), 5.0))
    x = Tensor(np.random.default_rng(0).random((2, 3, 4, 6)), requires_grad=True)
    assert upsample2(maxpool2(x)).shape == x.shape
    y = Tensor(np.ones((1, 2, 3, 3)), requires_grad=True)
    upsample2(y).sum().backward()
    np.testing.assert_array_equal(y.grad, np.full((1, 2, 3, 3), 4.0))


def test_concat_channels(rng):
    with precision(np.float64):
        a = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
        c = concat_channels(a, b)
        assert c.shape == (2, 5, 3, 3)
        np.testing.assert_array_equal(c.data[:, :2], a.data)
        np.testing.assert_array_equal(c.data[:, 2:], b.data)
        probe = rng.standard_normal(c.shape)
        (c * Tensor(probe)).sum().backward()
        fd_a = central_difference(lambda v: float((np.concatenate([v, b.data], 1) * probe).sum()), a.data.copy())
        fd_b = central_difference(lambda v: float((np.concatenate([a.data, v], 1) * probe).sum()), b.data.copy())
    np.testing.assert_allclose(a.grad, fd_a, atol=1e-8)
    np.testing.assert_allclose(b.grad, fd_b, atol=1e-8)
    with pytest.raises(DimensionError):
        concat_channels(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 4, 3))))


def test_backward_visits_nodes_in_reverse_execution_order():
    x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    a = relu(x)
    b = maxpool2(a)
    c = upsample2(b)
    d = concat_channels(c, a)
    loss = d.sum()
    order = execution_order(loss)
    assert [t._seq for t in order] == sorted(t._seq for t in order)
    assert order[-1] is loss and order[0] is a
    loss.backward()
    assert x.grad is not None and x.grad.shape == x.shape


def test_grad_shape_matches_data_and_accumulates():
    x = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
    (x * x).sum().backward()
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, 4 * x.data)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = relu(x)
    assert not y.requires_grad and y._backward is None


def test_precision_switches_dtype():
    assert Tensor([1.0]).dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
        assert conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 1, 1)))).dtype == np.float64


def test_same_graph_twice_is_bit_identical():
    def run():
        r = np.random.default_rng(7)
        x = Tensor(r.standard_normal((2, 3, 8, 8)), requires_grad=True)
        k = Tensor(r.standard_normal((4, 3, 3, 3)), requires_grad=True)
        y = maxpool2(relu(conv2d(x, k, None, padding=1)))
        y.sum().backward()
        return y.data.tobytes(), x.grad.tobytes(), k.grad.tobytes()

    assert run() == run()
