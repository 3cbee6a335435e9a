import numpy as np
import pytest

from slimseg.complexity import (InvalidImageError, sobel, spatial_complexity,
                                to_grayscale, validate_image)

from conftest import sc_mean_reference, sobel_reference


def test_sobel_matches_bruteforce_5x5():
    rng = np.random.default_rng(0)
    gray = rng.random((5, 5))
    grad = sobel(gray)
    ref_h, ref_v = sobel_reference(gray)
    assert np.abs(grad.s_h - ref_h).max() < 1e-12
    assert np.abs(grad.s_v - ref_v).max() < 1e-12


def test_sobel_matches_bruteforce_all_small_dims():
    rng = np.random.default_rng(1)
    for h in range(3, 17):
        for w in range(3, 17):
            gray = rng.random((h, w))
            grad = sobel(gray)
            ref_h, ref_v = sobel_reference(gray)
            assert np.abs(grad.s_h - ref_h).max() < 1e-12
            assert np.abs(grad.s_v - ref_v).max() < 1e-12


def test_sobel_output_dims_match_input():
    gray = np.random.default_rng(2).random((7, 11))
    grad = sobel(gray)
    assert grad.s_h.shape == (7, 11)
    assert grad.s_v.shape == (7, 11)


def test_constant_image_has_zero_complexity():
    gray = np.full((9, 9), 0.37)
    sc = spatial_complexity(gray)
    assert sc.sc_mean < 1e-14  # exact zero up to accumulation round-off
    assert sc.pixel_count == 81


def test_vertical_edge_responds_horizontally():
    gray = np.zeros((8, 8))
    gray[:, 4:] = 1.0
    grad = sobel(gray)
    assert np.abs(grad.s_h).max() > 0.0
    assert np.abs(grad.s_v).max() < 1e-12


def test_rotation_90_preserves_sc_mean():
    rng = np.random.default_rng(3)
    gray = rng.random((10, 14))
    a = spatial_complexity(gray).sc_mean
    b = spatial_complexity(np.rot90(gray).copy()).sc_mean
    assert abs(a - b) < 1e-12


def test_intensity_scaling_is_linear():
    rng = np.random.default_rng(4)
    gray = rng.random((12, 12))
    full = spatial_complexity(gray).sc_mean
    half = spatial_complexity(0.5 * gray).sc_mean
    assert abs(half - 0.5 * full) < 1e-12


def test_sc_mean_counts_all_pixels_including_borders():
    rng = np.random.default_rng(5)
    gray = rng.random((6, 9))
    assert abs(spatial_complexity(gray).sc_mean - sc_mean_reference(gray)) < 1e-14


def test_grayscale_luma_weights():
    rng = np.random.default_rng(6)
    img = rng.random((5, 5, 3))
    gray = to_grayscale(img)
    want = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    assert np.abs(gray - want).max() < 1e-12


def test_grayscale_passthrough():
    gray = np.random.default_rng(7).random((5, 5))
    assert np.array_equal(to_grayscale(gray), gray)
    assert np.array_equal(to_grayscale(gray[:, :, None]), gray)


def test_validate_rejects_out_of_range():
    with pytest.raises(InvalidImageError):
        validate_image(np.full((4, 4), 1.5))
    with pytest.raises(InvalidImageError):
        validate_image(np.full((4, 4), -0.1))


def test_validate_rejects_bad_shapes():
    with pytest.raises(InvalidImageError):
        validate_image(np.zeros((4, 4, 4)))
    with pytest.raises(InvalidImageError):
        validate_image(np.zeros((0, 4)))


def test_sobel_rejects_tiny_images():
    with pytest.raises(InvalidImageError):
        sobel(np.zeros((2, 5)))
    with pytest.raises(InvalidImageError):
        sobel(np.zeros((5, 2)))
