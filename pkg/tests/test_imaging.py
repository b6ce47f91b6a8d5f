import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from palmseg.data import clahe
from palmseg.errors import ConfigError, ContractError
from palmseg.imaging import (
    BaselineParams,
    baseline_pipeline,
    canny,
    desaturate,
    dilate,
    gaussian_blur,
    gaussian_kernel,
    negative,
    threshold,
)
from palmseg.synthetic import palm_lines

binary_images = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.sampled_from([0, 255]))


def rgb(r, g, b, shape=(2, 2)):
    return np.broadcast_to(np.array([r, g, b], dtype=np.uint8), (*shape, 3)).copy()


def test_desaturate_examples():
    assert np.all(desaturate(rgb(255, 255, 255)) == 255)
    assert np.all(desaturate(rgb(255, 0, 0)) == 76)
    v = np.arange(12, dtype=np.uint8).reshape(3, 4)
    np.testing.assert_array_equal(desaturate(np.stack([v, v, v], -1)), v)
    with pytest.raises(ContractError):
        desaturate(np.zeros((3, 3)))


def test_negative_and_threshold():
    assert negative(np.array([0], np.uint8))[0] == 255
    img = np.arange(256, dtype=np.uint8)
    np.testing.assert_array_equal(negative(negative(img)), img)
    assert np.all(threshold(img, 0) == 255)
    np.testing.assert_array_equal(threshold(img, 128), np.where(img >= 128, 255, 0))
    with pytest.raises(ConfigError):
        threshold(img, 300)


def test_dilate_single_pixel():
    img = np.zeros((5, 5), np.uint8)
    img[2, 2] = 255
    out = dilate(img, 1)
    expect = np.zeros((5, 5), np.uint8)
    expect[1:4, 1:4] = 255
    np.testing.assert_array_equal(out, expect)


def test_dilate_rejects_grey():
    with pytest.raises(ContractError):
        dilate(np.full((3, 3), 7, np.uint8))


@settings(max_examples=60, deadline=None)
@given(binary_images, st.integers(0, 3))
def test_dilate_is_extensive_and_monotone(img, r):
    out = dilate(img, r)
    assert np.all(out >= img)
    smaller = img.copy()
    smaller[::2] = 0
    assert np.all(dilate(smaller, r) <= out)


def test_gaussian_kernel_normalised():
    k = gaussian_kernel(1.0)
    assert k.shape == (3, 3) and k.sum() == pytest.approx(1.0)
    assert k[1, 1] == k.max()
    with pytest.raises(ConfigError):
        gaussian_kernel(0.0)


def test_blur_constant_unchanged():
    img = np.full((6, 7), 93, np.uint8)
    np.testing.assert_array_equal(gaussian_blur(img, 1.5), img)
    prob = np.full((4, 4), 0.3)
    np.testing.assert_allclose(gaussian_blur(prob), prob)


def test_canny_constant_has_no_edges():
    assert not canny(np.full((20, 20), 120, np.uint8)).any()


def test_canny_vertical_step_single_pixel():
    img = np.zeros((24, 24), np.uint8)
    img[:, 12:] = 200
    edges = canny(img) > 0
    rows = edges[3:-3]
    assert np.all(rows.sum(axis=1) == 1)
    cols = np.unique(np.nonzero(rows)[1])
    assert cols.tolist() in ([11], [12])


def test_canny_parameter_errors():
    with pytest.raises(ConfigError):
        canny(np.zeros((8, 8), np.uint8), low=50, high=50)
    with pytest.raises(ConfigError):
        canny(np.zeros((8, 8), np.uint8), low=0, high=10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(1, 40), st.floats(1, 40))
def test_canny_edges_shrink_as_low_rises(seed, a, b):
    lo1, lo2 = sorted((a, b))
    img = palm_lines(np.random.default_rng(seed), size=32)[0]
    e1 = canny(img, low=lo1, high=60) > 0
    e2 = canny(img, low=lo2, high=60) > 0
    assert np.all(e1 | ~e2)


def test_clahe_constant_and_range(rng):
    flat = clahe(np.full((32, 40), 77, np.uint8))
    assert np.unique(flat).size == 1
    noisy = rng.integers(0, 256, (33, 47), dtype=np.uint8)
    out = clahe(noisy, 3.0, (4, 5))
    assert out.dtype == np.uint8 and out.shape == noisy.shape


def test_clahe_spreads_low_contrast_ramp():
    ramp = np.tile(np.linspace(100, 130, 64), (64, 1)).round().astype(np.uint8)
    assert clahe(ramp).std() > ramp.std()


def test_clahe_colour_per_channel(rng):
    img = rng.integers(90, 140, (16, 16, 3), dtype=np.uint8)
    out = clahe(img, 2.0, (2, 2))
    for c in range(3):
        np.testing.assert_array_equal(out[..., c], clahe(img[..., c], 2.0, (2, 2)))


def test_baseline_blank_image():
    assert not baseline_pipeline(np.full((32, 32, 3), 180, np.uint8)).any()


def test_baseline_finds_curve():
    img, mask = palm_lines(np.random.default_rng(5), size=96, rgb=True)
    out = baseline_pipeline(img, BaselineParams())
    assert out.shape == mask.shape
    line = mask > 0
    assert (out[line] > 0).mean() >= 0.6
