"""Seeded streams, SPD matrix helpers, and log-log slope fits."""

import numpy as np
import pytest

from advsde.numerics import (
    RngStream,
    assert_spd,
    gaussian_sample,
    loglog_fit,
    matrix_sqrt_spd,
    rng_substream,
    spd_random,
)


def test_same_substream_is_bitwise_reproducible():
    a = rng_substream(7, 0).generator.random(100)
    b = rng_substream(7, 0).generator.random(100)
    np.testing.assert_array_equal(a, b)


def test_sibling_substreams_differ():
    a = rng_substream(7, 0).generator.random(8)
    b = rng_substream(7, 1).generator.random(8)
    assert not np.array_equal(a, b)


def test_substream_independent_of_sibling_consumption():
    # Worker 3's draws must not depend on how many other workers ran first,
    # so splitting work across any number of consumers replays identically.
    lone = rng_substream(7, 3).generator.random(16)
    for index in range(3):
        rng_substream(7, index).generator.random(999)
    again = rng_substream(7, 3).generator.random(16)
    np.testing.assert_array_equal(lone, again)


def test_child_streams_extend_the_path():
    root = RngStream(11)
    assert root.child(2, 5).path == (2, 5)
    direct = RngStream(11, (2, 5)).generator.random(4)
    np.testing.assert_array_equal(root.child(2, 5).generator.random(4), direct)


def test_negative_substream_index_rejected():
    with pytest.raises(ValueError, match="index"):
        rng_substream(7, -1)


def test_spd_random_forced_spectrum_is_exact():
    mat = spd_random(1, 2.0, 2.0, RngStream(0, (1,)))
    np.testing.assert_allclose(mat, [[2.0]])


def test_spd_random_respects_eigenvalue_range():
    mat = spd_random(10, 0.5, 3.0, RngStream(0, (2,)))
    eigvals = np.linalg.eigvalsh(mat)
    assert eigvals.min() >= 0.5 - 1e-12
    assert eigvals.max() <= 3.0 + 1e-12
    np.testing.assert_allclose(mat, mat.T)


def test_spd_random_same_seed_identical():
    a = spd_random(3, 0.5, 1.5, RngStream(42, (0,)))
    b = spd_random(3, 0.5, 1.5, RngStream(42, (0,)))
    np.testing.assert_array_equal(a, b)


def test_spd_random_rejects_bad_range():
    with pytest.raises(ValueError, match="eig_low"):
        spd_random(2, -1.0, 1.0, RngStream(0))


def test_matrix_sqrt_identity():
    np.testing.assert_allclose(matrix_sqrt_spd(np.eye(3)), np.eye(3))


def test_matrix_sqrt_diagonal():
    np.testing.assert_allclose(matrix_sqrt_spd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))


def test_matrix_sqrt_random_spd_squares_back():
    mat = spd_random(6, 0.3, 4.0, RngStream(5, (0,)))
    root = matrix_sqrt_spd(mat)
    err = np.linalg.norm(root @ root - mat) / np.linalg.norm(mat)
    assert err <= 1e-10
    np.testing.assert_allclose(root, root.T)


def test_assert_spd_rejects_indefinite():
    with pytest.raises(ValueError, match="eigenvalue"):
        assert_spd(np.diag([1.0, -0.5]))


def test_assert_spd_rejects_asymmetric():
    with pytest.raises(ValueError, match="symmetric"):
        assert_spd(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_gaussian_sample_mean_within_lln_bound():
    count = 100_000
    samples = gaussian_sample(np.zeros(3), np.eye(3), count, RngStream(9, (0,)))
    assert samples.shape == (count, 3)
    assert np.abs(samples.mean(axis=0)).max() <= 4.0 / np.sqrt(count)


def test_gaussian_sample_rejects_degenerate_cov():
    with pytest.raises(ValueError):
        gaussian_sample(np.zeros(2), np.diag([1.0, -1e-3]), 10, RngStream(9, (1,)))


def test_gaussian_sample_deterministic():
    a = gaussian_sample(np.array([1.0, 2.0]), np.eye(2), 50, RngStream(9, (2,)))
    b = gaussian_sample(np.array([1.0, 2.0]), np.eye(2), 50, RngStream(9, (2,)))
    np.testing.assert_array_equal(a, b)


def test_loglog_fit_exact_quadratic_power_law():
    x = np.array([0.1, 0.2, 0.4])
    fit = loglog_fit(x, 3.0 * x**2)
    assert fit.slope == pytest.approx(2.0, abs=1e-12)
    assert fit.n_points == 3


def test_loglog_fit_exact_linear_power_law():
    x = np.array([0.1, 0.2, 0.4])
    fit = loglog_fit(x, 5.0 * x)
    assert fit.slope == pytest.approx(1.0, abs=1e-12)


def test_loglog_fit_slope_of_perturbed_square():
    # y = x^2 + 0.001 x^3 bends the fitted slope slightly above 2.
    x = np.geomspace(0.05, 0.2, 6)
    fit = loglog_fit(x, x**2 + 0.001 * x**3)
    assert 2.0 < fit.slope < 2.1
