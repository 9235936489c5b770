"""Full-covariance Gaussian mixture fitted by EM with k-means++ initialisation."""
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, solve_triangular
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import DegenerateCluster

_MASS_FLOOR = 1e-10


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    responsibilities: np.ndarray
    log_likelihood: float = float("-inf")
    history: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False

    @property
    def k(self):
        return len(self.weights)

    def labels(self):
        return np.argmax(self.responsibilities, axis=1)

    def to_json(self):
        """Debug dump; not a stable format."""
        return json.dumps(
            {
                "k": self.k,
                "weights": self.weights.tolist(),
                "means": self.means.tolist(),
                "log_likelihood": self.log_likelihood,
                "n_iter": self.n_iter,
            }
        )


def _kmeans_plus_plus(x, k, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans_labels(x, k, rng, n_iter=20):
    """Seeded k-means++ followed by Lloyd iterations; returns hard labels."""
    centers = _kmeans_plus_plus(x, k, rng)
    labels = None
    for _ in range(n_iter):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        new = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return labels


def _estimate_log_gaussian(x, means, covs):
    n, c = x.shape
    out = np.empty((n, len(means)))
    for j, (mu, cov) in enumerate(zip(means, covs)):
        chol, _ = cho_factor(cov, lower=True)
        chol = np.tril(chol)
        z = solve_triangular(chol, (x - mu).T, lower=True)
        log_det = 2.0 * np.log(np.diag(chol)).sum()
        out[:, j] = -0.5 * (c * np.log(2 * np.pi) + log_det + (z**2).sum(axis=0))
    return out


def _m_step(x, resp, reg):
    n, c = x.shape
    nk = resp.sum(axis=0)
    means = (resp.T @ x) / nk[:, None]
    covs = np.empty((len(nk), c, c))
    for j in range(len(nk)):
        diff = x - means[j]
        covs[j] = (resp[:, j, None] * diff).T @ diff / nk[j]
        covs[j] = 0.5 * (covs[j] + covs[j].T) + reg * np.eye(c)
    return nk / n, means, covs


def log_density(x, weights, means, covs):
    """Per-point log of the mixture density sum_k pi_k N(x | mu_k, Sigma_k)."""
    return logsumexp(np.log(weights) + _estimate_log_gaussian(x, means, covs), axis=1)


def fit_gmm(features, k=5, max_iters=100, tol=1e-3, seed=0, reg_covar=1e-6):
    """Fit a K-component GMM by EM.

    ``tol`` applies to the mean per-point log-likelihood.  A component whose
    responsibility mass drops below 1e-10 is re-seeded once at the point of
    lowest density; a second collapse raises :class:`DegenerateCluster`.
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)

    resp = np.zeros((n, k))
    resp[np.arange(n), kmeans_labels(x, k, rng)] = 1.0
    reseeded = False

    def m_step(resp, weights=None, means=None, covs=None):
        nonlocal reseeded
        dead = np.flatnonzero(resp.sum(axis=0) < _MASS_FLOOR)
        if len(dead):
            if reseeded:
                raise DegenerateCluster(f"component(s) {dead.tolist()} collapsed twice")
            reseeded = True
            if means is None:
                mass = resp.sum(axis=0)
                live = mass >= _MASS_FLOOR
                centers = resp[:, live].T @ x / mass[live, None]
                score = -((x[:, None, :] - centers[None]) ** 2).sum(-1).min(axis=1)
            else:
                score = log_density(x, weights, means, covs)
            order = np.argsort(score, kind="stable")
            resp = resp.copy()
            for j, idx in zip(dead, order):
                resp[idx] = 0.0
                resp[idx, j] = 1.0
        return _m_step(x, resp, reg_covar)

    weights, means, covs = m_step(resp)
    history = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        weighted = np.log(weights) + _estimate_log_gaussian(x, means, covs)
        log_norm = logsumexp(weighted, axis=1)
        resp = np.exp(weighted - log_norm[:, None])
        ll = float(log_norm.mean())
        history.append(ll)
        if len(history) > 1 and history[-1] - history[-2] < tol:
            converged = True
            break
        if it == max_iters:
            break
        weights, means, covs = m_step(resp, weights, means, covs)
    return GmmModel(weights, means, covs, resp, history[-1], history, it, converged)


class GaussianMixtureEM(BaseEstimator):
    """Estimator wrapper around :func:`fit_gmm`."""

    def __init__(self, n_components=5, max_iter=100, tol=1e-3, reg_covar=1e-6, random_state=0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.reg_covar = reg_covar
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=self.n_components)
        self.model_ = fit_gmm(X, self.n_components, self.max_iter, self.tol, self.random_state, self.reg_covar)
        self.weights_ = self.model_.weights
        self.means_ = self.model_.means
        self.covariances_ = self.model_.covariances
        self.n_iter_ = self.model_.n_iter
        self.converged_ = self.model_.converged
        self.n_features_in_ = X.shape[1]
        return self

    def score_samples(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        return log_density(X, self.weights_, self.means_, self.covariances_)

    def score(self, X, y=None):
        return float(self.score_samples(X).mean())

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        weighted = np.log(self.weights_) + _estimate_log_gaussian(X, self.means_, self.covariances_)
        return np.exp(weighted - logsumexp(weighted, axis=1, keepdims=True))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)
