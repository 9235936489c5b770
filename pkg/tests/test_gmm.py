import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.mixture import GaussianMixture

from mifmatch.gmm import GaussianMixtureEM, fit_gmm, kmeans_labels, log_density


def two_clusters(seed, n=40, sigma=0.1):
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, sigma, size=(n, 2))
    b = rng.normal(100.0, sigma, size=(n, 2))
    return a, b, np.concatenate([a, b])


def test_constant_points_single_component():
    v = np.array([1.5, -2.0, 0.25])
    m = fit_gmm(np.tile(v, (10, 1)), k=1)
    np.testing.assert_allclose(m.means[0], v, atol=1e-12)
    np.testing.assert_allclose(m.covariances[0], 1e-6 * np.eye(3), atol=1e-15)
    assert np.isfinite(m.log_likelihood)


def test_two_cluster_recovery():
    a, b, x = two_clusters(0)
    m = fit_gmm(x, k=2, seed=3)
    order = np.argsort(m.means[:, 0])
    np.testing.assert_allclose(m.means[order[0]], a.mean(0), atol=1e-2)
    np.testing.assert_allclose(m.means[order[1]], b.mean(0), atol=1e-2)
    assert np.all(m.responsibilities.max(axis=1) > 0.999)
    np.testing.assert_allclose(np.sort(m.weights), [0.5, 0.5])


@pytest.mark.parametrize("seed", range(10))
def test_log_likelihood_monotone(seed):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(c, 1.0, size=(30, 3)) for c in (0.0, 2.0, 5.0)])
    m = fit_gmm(x, k=4, seed=seed, tol=1e-9, max_iters=60)
    assert np.all(np.diff(m.history) >= -1e-7)


def test_model_invariants():
    x = np.random.default_rng(1).normal(size=(60, 4))
    m = fit_gmm(x, k=5, seed=0)
    assert m.weights.sum() == pytest.approx(1.0)
    assert np.all(m.weights > 0)
    np.testing.assert_allclose(m.responsibilities.sum(axis=1), 1.0, atol=1e-9)
    for cov in m.covariances:
        np.testing.assert_allclose(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() >= 1e-8
    assert m.labels().shape == (60,)
    assert '"k": 5' in m.to_json()


def test_density_integrates_to_one():
    rng = np.random.default_rng(2)
    x = np.concatenate([rng.normal([0, 0], 0.5, size=(50, 2)), rng.normal([3, 1], 0.8, size=(50, 2))])
    m = fit_gmm(x, k=2, seed=0)
    sd = np.sqrt(np.max([np.linalg.eigvalsh(c).max() for c in m.covariances]))
    lo = m.means.min(axis=0) - 7 * sd
    hi = m.means.max(axis=0) + 7 * sd
    pts = np.random.default_rng(3).uniform(lo, hi, size=(400_000, 2))
    estimate = np.exp(log_density(pts, m.weights, m.means, m.covariances)).mean() * np.prod(hi - lo)
    assert estimate == pytest.approx(1.0, rel=0.02)


def test_agrees_with_sklearn_on_separated_data():
    _, _, x = two_clusters(5, sigma=1.0)
    ours = fit_gmm(x, k=2, seed=0, tol=1e-8)
    ref = GaussianMixture(2, covariance_type="full", reg_covar=1e-6, random_state=0, tol=1e-8).fit(x)
    np.testing.assert_allclose(np.sort(ours.means[:, 0]), np.sort(ref.means_[:, 0]), atol=1e-6)
    assert ours.log_likelihood == pytest.approx(ref.score(x), abs=1e-6)


def test_needs_enough_points():
    with pytest.raises(ValueError):
        fit_gmm(np.zeros((3, 2)), k=5)


def test_duplicate_points_reseed_collapsed_component():
    x = np.zeros((6, 2))
    m = fit_gmm(x, k=2, seed=0)
    assert np.all(m.weights > 0)
    assert np.all(np.isfinite(m.means))


def test_seed_determinism():
    x = np.random.default_rng(4).normal(size=(40, 3))
    a = fit_gmm(x, k=3, seed=7)
    b = fit_gmm(x, k=3, seed=7)
    np.testing.assert_array_equal(a.means, b.means)
    labels = kmeans_labels(x, 3, np.random.default_rng(0))
    assert set(labels.tolist()) <= {0, 1, 2}


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_monotone_property(seed, k):
    x = np.random.default_rng(seed).normal(size=(25, 2))
    m = fit_gmm(x, k=k, seed=seed, tol=1e-10, max_iters=40)
    assert np.all(np.diff(m.history) >= -1e-7)
    np.testing.assert_allclose(m.responsibilities.sum(axis=1), 1.0, atol=1e-9)


def test_estimator_api():
    _, _, x = two_clusters(6)
    est = GaussianMixtureEM(n_components=2, random_state=1).fit(x)
    assert est.get_params()["n_components"] == 2
    proba = est.predict_proba(x)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    labels = est.predict(x)
    assert len(set(labels[:40])) == 1 and labels[0] != labels[-1]
    assert np.isfinite(est.score(x))
    with pytest.raises(ValueError):
        GaussianMixtureEM(n_components=2).fit(np.array([[np.nan, 0.0], [1.0, 1.0]]))
