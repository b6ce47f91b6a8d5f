import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from palmseg.cfm import (
    BRANCHES,
    CFMWeights,
    attention_weights,
    cfm_forward,
    context_modeling,
    transform_left,
    transform_right,
)
from palmseg.errors import ConfigError, DimensionError
from palmseg.tensor import Tensor, precision


def zero_transforms(w):
    for b in ("left_a", "left_b", "right_a", "right_b"):
        conv = getattr(w, b)
        conv.weight.data[...] = 0
        conv.bias.data[...] = 0
    return w


def reference_cfm(x, w):
    """Plain numpy evaluation of the block, written out step by step."""
    def lin(conv, v):
        return v @ conv.weight.data[:, :, 0, 0].T + conv.bias.data

    n, c, h, wd = x.shape
    logits = np.einsum("nchw,c->nhw", x, w.ctx_proj.weight.data[0, :, 0, 0]) + w.ctx_proj.bias.data[0]
    flat = logits.reshape(n, -1)
    alpha = np.exp(flat - flat.max(axis=1, keepdims=True))
    alpha /= alpha.sum(axis=1, keepdims=True)
    g = np.einsum("ncp,np->nc", x.reshape(n, c, -1), alpha)
    gate = 1 / (1 + np.exp(-lin(w.left_b, np.maximum(lin(w.left_a, g), 0))))
    add = lin(w.right_b, np.maximum(lin(w.right_a, g), 0))
    return gate[:, :, None, None] * x + add[:, :, None, None]


def test_init_shapes_and_names():
    w = CFMWeights.init(16, reduction=4)
    assert w.ctx_proj.weight.shape == (1, 16, 1, 1)
    assert w.left_a.weight.shape == (4, 16, 1, 1)
    assert w.left_b.weight.shape == (16, 4, 1, 1)
    names = w.named_parameters()
    assert set(names) == {f"cfm.{b}.{p}" for b in BRANCHES for p in ("weight", "bias")}


def test_reduction_must_divide_channels():
    with pytest.raises(ConfigError):
        CFMWeights.init(10, reduction=4)
    with pytest.raises(ConfigError):
        CFMWeights.init(8, reduction=0)


def test_context_of_constant_channels(rng):
    w = CFMWeights.init(8, seed=5)
    consts = rng.standard_normal(8).astype(np.float32)
    x = Tensor(np.broadcast_to(consts[None, :, None, None], (1, 8, 5, 5)))
    np.testing.assert_allclose(context_modeling(x, w).data[0], consts, rtol=1e-5, atol=1e-6)


def test_context_of_single_position(rng):
    w = CFMWeights.init(8, seed=1)
    x = Tensor(rng.standard_normal((3, 8, 1, 1)))
    np.testing.assert_array_equal(context_modeling(x, w).data, x.data[:, :, 0, 0])


def test_attention_sums_to_one(rng):
    w = CFMWeights.init(8, seed=2)
    a = attention_weights(Tensor(rng.standard_normal((2, 8, 4, 6))), w).data
    assert a.shape == (2, 1, 4, 6)
    np.testing.assert_allclose(a.sum(axis=(1, 2, 3)), 1.0, atol=1e-6)


def test_zero_transform_weights():
    w = zero_transforms(CFMWeights.init(8))
    g = Tensor(np.random.default_rng(0).standard_normal((2, 8)))
    np.testing.assert_array_equal(transform_left(g, w).data, 0.5)
    np.testing.assert_array_equal(transform_right(g, w).data, 0.0)


def test_zero_transforms_halve_input(rng):
    w = zero_transforms(CFMWeights.init(8))
    x = Tensor(rng.standard_normal((2, 8, 3, 3)))
    np.testing.assert_allclose(cfm_forward(x, w).data, 0.5 * x.data, rtol=1e-6)


def test_forward_matches_numpy_reference(rng):
    with precision(np.float64):
        w = CFMWeights.init(16, reduction=4, seed=9)
        x = rng.standard_normal((2, 16, 5, 7))
        out = cfm_forward(Tensor(x), w).data
    np.testing.assert_allclose(out, reference_cfm(x, w), rtol=1e-10, atol=1e-12)


def test_channel_mismatch():
    w = CFMWeights.init(8)
    with pytest.raises(DimensionError, match="8 channels"):
        context_modeling(Tensor(np.zeros((1, 4, 2, 2))), w)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_gate_in_unit_interval_and_shape_preserved(n, h, wd, seed):
    w = CFMWeights.init(8, reduction=2, seed=seed % 1000)
    r = np.random.default_rng(seed)
    x = Tensor(r.standard_normal((n, 8, h, wd)) * 3)
    g = context_modeling(x, w)
    gate = transform_left(g, w).data
    assert np.all((gate >= 0) & (gate <= 1))
    out = cfm_forward(x, w).data
    assert out.shape == x.shape and np.all(np.isfinite(out))
