"""Gaussian mixtures with exact diffused marginals, scores and KL."""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

__all__ = ["GaussianMixture", "diffuse", "score", "log_density", "sample", "gaussian_kl"]

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Mixture ``sum_i w_i N(mu_i, Sigma_i)`` in ``D`` dimensions.

    Parameters
    ----------
    weights : array-like of shape (K,)
    means : array-like of shape (K, D)
    covs : array-like of shape (K, D, D), or (K, D) for diagonal covariances
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        K, D = mu.shape
        cov = np.asarray(self.covs, dtype=np.float64)
        if cov.shape == (K, D):
            cov = np.stack([np.diag(c) for c in cov])
        if cov.shape != (K, D, D) or w.shape != (K,):
            raise ValueError(f"inconsistent shapes: weights {w.shape}, means {mu.shape}, covs {cov.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=0, atol=1e-12):
            raise ValueError("covariances must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariances must be positive definite") from exc
        for name, val in (("weights", w), ("means", mu), ("covs", cov)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def gaussian(cls, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 0:
            cov = cov * np.eye(mean.size)
        elif cov.ndim == 1:
            cov = np.diag(cov)
        return cls(np.ones(1), mean[None], cov[None])

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["weights"]), np.asarray(d["means"]), np.asarray(d["covs"]))

    def to_dict(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "covs": self.covs.tolist()}

    @property
    def n_components(self):
        return self.weights.size

    @property
    def dim(self):
        return self.means.shape[1]

    def _component_logpdf(self, X):
        # (N, K) matrix of log N(x_n; mu_k, Sigma_k)
        diff = X[:, None, :] - self.means[None, :, :]
        out = np.empty((X.shape[0], self.n_components))
        for k in range(self.n_components):
            L = self._chol[k]
            z = np.linalg.solve(L, diff[:, k, :].T)
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            out[:, k] = -0.5 * (np.sum(z * z, axis=0) + logdet + self.dim * _LOG_2PI)
        return out

    def responsibilities(self, x):
        X, single = _as_batch(x, self.dim)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        a = logw[None, :] + self._component_logpdf(X)
        g = np.exp(a - logsumexp(a, axis=1, keepdims=True))
        return g[0] if single else g


def _as_batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim <= 1
    X = x.reshape(1, -1) if single else x
    if X.shape[1] != dim:
        raise ValueError(f"expected dimension {dim}, got {X.shape[1]}")
    return X, single


def diffuse(gm, s, t):
    """Marginal of ``alpha_t x + sigma_t eps`` for ``x ~ gm``."""
    a, sg = float(s.alphas[t]), float(s.sigmas[t])
    covs = a * a * gm.covs + sg * sg * np.eye(gm.dim)[None]
    return GaussianMixture(gm.weights.copy(), a * gm.means, covs)


def log_density(gm, x):
    """``log sum_i w_i N(x; mu_i, Sigma_i)`` via max-shifted log-sum-exp."""
    X, single = _as_batch(x, gm.dim)
    with np.errstate(divide="ignore"):
        logw = np.log(gm.weights)
    out = logsumexp(logw[None, :] + gm._component_logpdf(X), axis=1)
    return float(out[0]) if single else out


def score(gm, x):
    """``grad_x log p(x)`` as the responsibility-weighted component scores."""
    X, single = _as_batch(x, gm.dim)
    gamma = gm.responsibilities(X)
    out = np.zeros_like(X)
    for k in range(gm.n_components):
        diff = X - gm.means[k]
        comp = -np.linalg.solve(gm.covs[k], diff.T).T
        out += gamma[:, k : k + 1] * comp
    return out[0] if single else out


def sample(gm, n, rng_seed):
    """Draw ``n`` i.i.d. samples; ``rng_seed`` is an int or a ``numpy`` Generator."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    u = rng.random(n)
    cdf = np.cumsum(gm.weights)
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), gm.n_components - 1)
    z = rng.standard_normal((n, gm.dim))
    L = np.linalg.cholesky(gm.covs)  # raises on a non-PD covariance
    return gm.means[idx] + np.einsum("nij,nj->ni", L[idx], z)


def gaussian_kl(p, q):
    """Closed-form ``KL(p || q)`` between two single Gaussians."""
    if p.n_components != 1 or q.n_components != 1:
        raise ValueError("gaussian_kl needs single-component inputs")
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    m0, m1 = p.means[0], q.means[0]
    S0, S1 = p.covs[0], q.covs[0]
    L1 = np.linalg.cholesky(S1)
    L0 = np.linalg.cholesky(S0)
    A = np.linalg.solve(L1, L0)
    dm = np.linalg.solve(L1, m1 - m0)
    logdet = 2.0 * (np.sum(np.log(np.diag(L1))) - np.sum(np.log(np.diag(L0))))
    kl = 0.5 * (np.sum(A * A) + dm @ dm - p.dim + logdet)
    return max(float(kl), 0.0)
