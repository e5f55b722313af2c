import math

import numpy as np
import pytest

from adapter.errors import ContractError, NumericError, ParameterError, ShapeError
from adapter.labelprop import (LabelPropConfig, build_affinity, fixed_point, one_hot, pinv, propagate_closed,
                               propagate_iterative, smooth_predictions)


def test_affinity_three_point_oracle():
    g = build_affinity(np.array([[0.0], [1.0], [3.0]]), sigma=1.0)
    a12, a13, a23 = math.exp(-0.5), math.exp(-4.5), math.exp(-2.0)
    A = np.array([[0, a12, a13], [a12, 0, a23], [a13, a23, 0]])
    np.testing.assert_allclose(g.A, A, rtol=1e-15)
    d = A.sum(axis=1)
    np.testing.assert_allclose(g.A_hat, A / np.sqrt(np.outer(d, d)), rtol=1e-14)
    np.testing.assert_allclose(g.A_hat, g.A_hat.T)


def test_identical_embeddings_have_unit_affinity():
    g = build_affinity(np.ones((3, 4)), sigma=0.1)
    np.testing.assert_array_equal(g.A, 1.0 - np.eye(3))


def test_auto_sigma_uses_embedding_std():
    z = np.random.default_rng(0).normal(0, 3.0, size=(20, 5))
    assert build_affinity(z, "auto").sigma == pytest.approx(np.std(z))
    with pytest.raises(ParameterError):
        build_affinity(z, "median")
    with pytest.raises(ParameterError):
        build_affinity(z, 0.0)


def test_isolated_nodes_keep_their_label():
    g = build_affinity(np.array([[0.0], [1e4], [2e4]]), sigma=1.0)
    assert not g.degree.any() and not g.A_hat.any()
    Y = one_hot([0, 1, 2], 3)
    np.testing.assert_array_equal(propagate_closed(g, Y, 0.99, 1e-12), Y)
    np.testing.assert_allclose(propagate_iterative(g, Y, 0.99), 0.01 * Y, rtol=1e-12)


def test_alpha_zero_returns_labels(rng):
    g = build_affinity(rng.normal(size=(6, 3)), sigma=1.0)
    Y = one_hot(rng.integers(0, 3, 6), 3)
    np.testing.assert_allclose(propagate_closed(g, Y, 0.0, 1e-12), Y, atol=1e-14)
    np.testing.assert_array_equal(propagate_iterative(g, Y, 0.0), Y)


def test_pinv_matches_numpy(rng):
    M = rng.normal(size=(7, 7))
    M[:, 0] = M[:, 1] * 1e-3 + M[:, 2]
    for rcond in (1e-12, 0.1, 0.5):
        np.testing.assert_allclose(pinv(M, rcond), np.linalg.pinv(M, rcond), atol=1e-10)


def test_pinv_errors_and_zero_matrix():
    np.testing.assert_array_equal(pinv(np.zeros((2, 3)), 0.1), np.zeros((3, 2)))
    with pytest.raises(ParameterError):
        pinv(np.eye(2), -1.0)
    with pytest.raises(NumericError):
        pinv(np.array([[np.nan, 0.0], [0.0, 1.0]]), 0.1)


def test_iteration_converges_to_fixed_point(rng):
    g = build_affinity(rng.normal(size=(12, 4)), sigma=1.5)
    Y = one_hot(rng.integers(0, 4, 12), 4)
    F_iter = propagate_iterative(g, Y, 0.9, max_iter=10_000, tol=1e-14)
    np.testing.assert_allclose(F_iter, fixed_point(g, Y, 0.9), atol=1e-12)
    # the closed form differs only by the positive factor 1 / (1 - alpha)
    np.testing.assert_array_equal(propagate_closed(g, Y, 0.9, 1e-12).argmax(1), F_iter.argmax(1))


def test_propagation_contracts(rng):
    g = build_affinity(rng.normal(size=(4, 2)), sigma=1.0)
    with pytest.raises(ContractError):
        propagate_closed(g, np.eye(4), 1.0)
    with pytest.raises(ParameterError):
        propagate_iterative(g, np.eye(4), -0.1)
    with pytest.raises(ShapeError):
        propagate_closed(g, np.eye(3), 0.5)
    with pytest.raises(ContractError):
        build_affinity(np.zeros((1, 3)))


def two_clusters(rng, n=5, sep=10.0, std=0.3):
    z = np.vstack([rng.normal(0, std, size=(n, 2)), rng.normal(0, std, size=(n, 2)) + [sep, 0]])
    truth = np.repeat([0, 1], n)
    return z, truth


@pytest.mark.parametrize("mode", ["closed", "iterative"])
def test_single_flip_is_corrected(rng, mode):
    z, truth = two_clusters(rng)
    pseudo = truth.copy()
    pseudo[2] = 1
    cfg = LabelPropConfig(alpha=0.99, sigma=1.0, rcond=1e-12, mode=mode)
    smoothed = smooth_predictions(z, one_hot(pseudo, 2), cfg)
    np.testing.assert_array_equal(smoothed, truth)


def test_disabled_or_singleton_returns_argmax(rng):
    z, truth = two_clusters(rng)
    logits = rng.normal(size=(10, 2))
    off = LabelPropConfig(enabled=False)
    np.testing.assert_array_equal(smooth_predictions(z, logits, off), logits.argmax(1))
    np.testing.assert_array_equal(smooth_predictions(z[:1], logits[:1], LabelPropConfig()), logits[:1].argmax(1))


def test_include_support_drops_support_rows(rng):
    z, truth = two_clusters(rng)
    cfg = LabelPropConfig(alpha=0.99, sigma=1.0, rcond=1e-12, include_support=True)
    out = smooth_predictions(z[1:5], one_hot(np.ones(4, int), 2), cfg, z[[0, 5]], np.array([0, 1]))
    assert out.shape == (4,)
    with pytest.raises(ContractError):
        smooth_predictions(z, one_hot(truth, 2), cfg)


def test_smoothing_shape_and_mode_errors(rng):
    with pytest.raises(ShapeError):
        smooth_predictions(rng.normal(size=(4, 2)), rng.normal(size=(3, 2)), LabelPropConfig())
    with pytest.raises(ParameterError):
        smooth_predictions(rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), LabelPropConfig(mode="spectral"))
