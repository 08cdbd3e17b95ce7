import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lookahead_bo.gp import (
    Dataset,
    FitConfig,
    GpModel,
    KernelHyperparams,
    NotPSDError,
    dense_posterior,
    fit_hyperparameters,
    kernel_eval,
    kernel_matrix,
    log_evidence,
    posterior,
    root_decompose,
)


def random_model(rng, n=10, d=2, noise=1e-3):
    X = rng.uniform(size=(n, d))
    y = np.sin(4 * X).sum(1) + 0.1 * rng.standard_normal(n)
    hp = KernelHyperparams(rng.uniform(0.2, 1.0, size=d), rng.uniform(0.5, 2.0), noise, 0.3)
    return GpModel.from_data(Dataset(X, y), hp)


# kernel -------------------------------------------------------------------------


def test_kernel_at_zero_distance_is_signal_variance():
    hp = KernelHyperparams(np.array([0.3, 0.7]), 2.5, 1e-4)
    assert kernel_eval([0.1, 0.2], [0.1, 0.2], hp) == pytest.approx(2.5, abs=1e-14)


def test_kernel_unit_distance_closed_form():
    hp = KernelHyperparams(np.array([1.0]), 1.0, 1e-4)
    r = 1.0
    expected = (1 + math.sqrt(5) * r + 5 * r * r / 3) * math.exp(-math.sqrt(5) * r)
    assert kernel_eval([0.0], [1.0], hp) == pytest.approx(expected, rel=1e-13)


def test_kernel_ard_scales_each_dimension():
    # r = sqrt((1/1)^2 + (2/2)^2) = sqrt(2), evaluated independently
    hp = KernelHyperparams(np.array([1.0, 2.0]), 3.0, 1e-4)
    r = math.sqrt(2.0)
    expected = 3.0 * (1 + math.sqrt(5) * r + 5 * r * r / 3) * math.exp(-math.sqrt(5) * r)
    assert kernel_eval([0, 0], [1, 2], hp) == pytest.approx(expected, rel=1e-13)


def test_kernel_rejects_dimension_mismatch_and_bad_hyperparameters():
    hp = KernelHyperparams(np.array([1.0, 2.0]), 3.0, 1e-4)
    with pytest.raises(ValueError):
        kernel_eval([0.0], [1.0], hp)
    with pytest.raises(ValueError):
        KernelHyperparams(np.array([-1.0]), 1.0, 1e-4)
    with pytest.raises(ValueError):
        KernelHyperparams(np.array([1.0]), 0.0, 1e-4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_gram_matrix_is_psd_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    hp = KernelHyperparams(rng.uniform(0.05, 2.0, size=3), rng.uniform(0.1, 5.0), 1e-4)
    X = rng.uniform(size=(16, 3))
    K = kernel_matrix(X, X, hp).numpy()
    assert np.allclose(K, K.T, atol=1e-14)
    assert np.linalg.eigvalsh(K).min() >= -1e-8
    assert np.all(K <= hp.signal_variance + 1e-12) and np.all(K > 0)


def test_hyperparameter_unconstrained_round_trip():
    hp = KernelHyperparams(np.array([0.2, 3.0]), 1.7, 3e-4, -0.4)
    back = KernelHyperparams.from_unconstrained(hp.to_unconstrained())
    assert np.allclose(back.lengthscales, hp.lengthscales, rtol=1e-14)
    assert back.signal_variance == pytest.approx(1.7, rel=1e-14)
    assert back.mean_constant == pytest.approx(-0.4)


# root decomposition -------------------------------------------------------------


def test_root_of_identity_is_identity():
    assert torch.equal(root_decompose(torch.eye(2, dtype=torch.float64)), torch.eye(2, dtype=torch.float64))


def test_root_two_by_two_closed_form():
    R = root_decompose(np.array([[2.0, 1.0], [1.0, 2.0]])).numpy()
    expected = np.array([[math.sqrt(2), 0], [1 / math.sqrt(2), math.sqrt(1.5)]])
    assert np.allclose(R, expected, atol=1e-14)


def test_root_reconstructs_random_psd():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((8, 8))
    M = A @ A.T + 1e-3 * np.eye(8)
    R = root_decompose(M).numpy()
    assert np.abs(R @ R.T - M).max() / np.abs(M).max() < 1e-8


def test_root_escalates_jitter_for_singular_psd():
    # a rank-one matrix is PSD but not PD; jitter makes it factorable
    v = np.array([[1.0], [2.0], [3.0]])
    R = root_decompose(v @ v.T).numpy()
    assert np.abs(R @ R.T - v @ v.T).max() < 1e-3


def test_root_raises_for_indefinite_matrix():
    with pytest.raises(NotPSDError):
        root_decompose(np.diag([1.0, -1.0]))


# posterior ----------------------------------------------------------------------


def test_empty_dataset_posterior_is_prior():
    hp = KernelHyperparams(np.array([0.5, 0.5]), 1.3, 1e-4, 0.7)
    model = GpModel.from_data(Dataset.empty(2), hp)
    post = posterior(model, np.array([[0.2, 0.9]]))
    assert float(post.mean) == pytest.approx(0.7)
    assert float(post.covariance) == pytest.approx(1.3)


def test_near_interpolation_at_training_point():
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(6, 1))
    y = np.cos(5 * X[:, 0])
    hp = KernelHyperparams(np.array([0.3]), 1.0, 1e-8)
    model = GpModel.from_data(Dataset(X, y), hp)
    post = model.posterior(torch.as_tensor(X[2:3]))
    assert abs(float(post.mean) - y[2]) < 1e-3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 64), st.integers(1, 8))
def test_cached_posterior_matches_dense_solve(seed, n, q):
    rng = np.random.default_rng(seed)
    model = random_model(rng, n=n, d=3, noise=rng.uniform(1e-4, 1e-1))
    pts = rng.uniform(size=(q, 3))
    post = model.posterior(torch.as_tensor(pts))
    mean, cov = dense_posterior(model.dataset, model.hyperparams, pts)
    assert np.abs(post.mean.numpy() - mean).max() < 1e-8
    assert np.abs(post.covariance.numpy() - cov).max() < 1e-8


def test_posterior_variance_bounded_by_prior():
    rng = np.random.default_rng(1)
    model = random_model(rng, n=20, d=2, noise=1e-6)
    pts = rng.uniform(size=(200, 1, 2))
    var = model.posterior(torch.as_tensor(pts)).variance.numpy()
    assert np.all(var >= -1e-8)
    assert np.all(var <= model.hyperparams.signal_variance + 1e-8)


def test_cache_invariants():
    rng = np.random.default_rng(2)
    model = random_model(rng, n=30)
    R, Rinv = model.root.numpy(), model.root_pinv.numpy()
    K = kernel_matrix(model.dataset.inputs, model.dataset.inputs, model.hyperparams).numpy()
    K += model.noise_variance * np.eye(30)
    assert np.abs(R @ R.T - K).max() <= 1e-8 * np.trace(K) / 30
    assert np.abs(Rinv @ R - np.eye(30)).max() <= 1e-6


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.array([[1.5]]), np.array([0.0]))
    with pytest.raises(ValueError):
        Dataset(np.array([[0.5]]), np.array([np.nan]))
    with pytest.raises(ValueError):
        Dataset(np.array([[0.5], [0.1]]), np.array([0.0]))


# hyperparameter fitting ---------------------------------------------------------


def _gp_prior_sample(seed, n=40, ls=0.2, noise=1e-4):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, 1))
    hp = KernelHyperparams(np.array([ls]), 1.0, noise)
    K = kernel_matrix(X, X, hp).numpy() + noise * np.eye(n)
    y = np.linalg.cholesky(K) @ rng.standard_normal(n)
    return Dataset(X, y)


def test_fit_recovers_lengthscale_bracket():
    data = _gp_prior_sample(11)
    hp = fit_hyperparameters(data, FitConfig(seed=0))
    assert 0.1 <= hp.lengthscales[0] <= 0.4


def test_fit_never_worse_than_initial_points():
    data = _gp_prior_sample(5, n=15)
    previous = KernelHyperparams(np.array([0.5]), 1.0, 1e-3)
    hp = fit_hyperparameters(data, FitConfig(seed=1), previous=previous)
    assert log_evidence(data, hp) >= log_evidence(data, previous) - 1e-9


def test_fit_is_shift_equivariant_in_the_mean():
    data = _gp_prior_sample(7, n=20)
    shifted = Dataset(data.inputs, data.outcomes + 3.0)
    a = fit_hyperparameters(data, FitConfig(seed=4))
    b = fit_hyperparameters(shifted, FitConfig(seed=4))
    assert b.mean_constant - a.mean_constant == pytest.approx(3.0, abs=1e-4)
    assert np.allclose(np.log(a.lengthscales), np.log(b.lengthscales), atol=1e-4)
    assert math.log(a.signal_variance) == pytest.approx(math.log(b.signal_variance), abs=1e-4)


def test_fit_rejects_tiny_or_bad_data():
    with pytest.raises(ValueError):
        fit_hyperparameters(Dataset(np.array([[0.5]]), np.array([1.0])))
