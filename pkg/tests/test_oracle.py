import math

import numpy as np
import pytest

from dynscore.oracle import GaussianMixture, diffuse, gaussian_kl, log_density, sample, score
from dynscore.schedule import build_vp_schedule
from oracles import log_mixture_mp

S = build_vp_schedule()


def _random_mixture(rng, K=3, D=2):
    w = rng.dirichlet(np.ones(K))
    means = rng.normal(0, 1.5, (K, D))
    covs = []
    for _ in range(K):
        A = rng.normal(0, 0.6, (D, D))
        covs.append(A @ A.T + 0.2 * np.eye(D))
    return GaussianMixture(w, means, np.array(covs))


TWO = GaussianMixture([0.3, 0.7], [[-1.0, 0.5], [1.5, -0.5]], [[0.2, 0.5], [0.4, 0.1]])


def test_diffuse_t0_identity():
    d = diffuse(TWO, S, 0)
    np.testing.assert_array_equal(d.means, TWO.means)
    np.testing.assert_array_equal(d.covs, TWO.covs)
    np.testing.assert_array_equal(d.weights, TWO.weights)


@pytest.mark.parametrize("t", [1, 250, 1000])
def test_standard_normal_fixed_point(t):
    g = GaussianMixture.gaussian(np.zeros(2), np.eye(2))
    d = diffuse(g, S, t)
    np.testing.assert_allclose(d.means, 0.0, atol=0)
    np.testing.assert_allclose(d.covs[0], np.eye(2), atol=1e-12)


def test_diffuse_moments_monte_carlo():
    t = 500
    n = 1_000_000
    rng = np.random.default_rng(11)
    x = sample(TWO, n, rng)
    xt = S.alphas[t] * x + S.sigmas[t] * rng.standard_normal(x.shape)
    d = diffuse(TWO, S, t)
    mean = d.weights @ d.means
    second = sum(w * (C + np.outer(m, m)) for w, m, C in zip(d.weights, d.means, d.covs))
    cov = second - np.outer(mean, mean)
    emp_mean = xt.mean(axis=0)
    se_mean = xt.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(emp_mean - mean) <= 3 * se_mean)
    # covariance entries: standard error of the mean of centered products
    c = xt - emp_mean
    for i in range(2):
        for j in range(2):
            prod = c[:, i] * c[:, j]
            se = prod.std(ddof=1) / math.sqrt(n)
            assert abs(prod.mean() - cov[i, j]) <= 3 * se


def test_diffuse_commutes_with_permutation():
    perm = [1, 0]
    P = GaussianMixture(TWO.weights[perm], TWO.means[perm], TWO.covs[perm])
    x = np.random.default_rng(0).normal(size=(50, 2))
    a = log_density(diffuse(TWO, S, 300), x)
    b = log_density(diffuse(P, S, 300), x)
    np.testing.assert_allclose(a, b, rtol=1e-14)


def test_equal_marginals_give_equal_scores():
    q = GaussianMixture([0.3, 0.7], TWO.means.copy(), TWO.covs.copy())
    x = np.random.default_rng(1).normal(size=(20, 2))
    for t in (0, 10, 900):
        np.testing.assert_array_equal(score(diffuse(q, S, t), x), score(diffuse(TWO, S, t), x))


def test_score_standard_normal():
    g = GaussianMixture.gaussian(np.zeros(2), np.eye(2))
    np.testing.assert_allclose(score(g, [1.0, -2.0]), [-1.0, 2.0])


def test_score_zero_at_mean():
    g = GaussianMixture.gaussian([0.4, -1.0], [[2.0, 0.3], [0.3, 0.5]])
    np.testing.assert_allclose(score(g, [0.4, -1.0]), 0.0, atol=1e-15)


def test_score_matches_finite_differences():
    rng = np.random.default_rng(5)
    gm = _random_mixture(rng)
    h = 1e-6
    worst = 0.0
    for x in rng.normal(0, 2, (200, 2)):
        g = score(gm, x)
        fd = np.array([(log_density(gm, x + h * e) - log_density(gm, x - h * e)) / (2 * h) for e in np.eye(2)])
        worst = max(worst, np.max(np.abs(g - fd)) / max(np.max(np.abs(g)), 1e-3))
    assert worst <= 1e-6


def test_score_finite_far_in_tails():
    s = score(TWO, np.array([[400.0, -300.0], [-1e4, 1e4]]))
    assert np.all(np.isfinite(s))
    assert np.all(np.isfinite(log_density(TWO, np.array([[1e4, 1e4]]))))


def test_log_density_standard_normal():
    g = GaussianMixture.gaussian([0.0], [[1.0]])
    assert log_density(g, [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    assert log_density(g, [0.0]) == pytest.approx(-0.918939, abs=1e-6)


def test_log_density_coincident_components():
    single = GaussianMixture.gaussian([0.2, 0.1], [[0.5, 0.1], [0.1, 0.3]])
    double = GaussianMixture([0.5, 0.5], np.repeat(single.means, 2, 0), np.repeat(single.covs, 2, 0))
    x = np.random.default_rng(2).normal(size=(10, 2))
    np.testing.assert_allclose(log_density(double, x), log_density(single, x), rtol=1e-14)


def test_log_density_matches_direct_summation():
    rng = np.random.default_rng(9)
    gm = _random_mixture(rng)
    for x in rng.normal(0, 3, (20, 2)):
        assert log_density(gm, x) == pytest.approx(log_mixture_mp(gm.weights, gm.means, gm.covs, x), rel=1e-12)


def test_sample_deterministic():
    np.testing.assert_array_equal(sample(TWO, 100, 3), sample(TWO, 100, 3))


def test_sample_clt_bound():
    n = 1_000_000
    g = GaussianMixture.gaussian(np.zeros(2), np.eye(2))
    m = sample(g, n, 0).mean(axis=0)
    assert np.all(np.abs(m) < 4 / math.sqrt(n))


def test_sample_degenerate_weights():
    gm = GaussianMixture([1.0, 0.0], [[-5.0], [5.0]], [[0.01], [0.01]])
    assert np.all(sample(gm, 5000, 1) < 0)


def test_gaussian_kl_closed_forms():
    a = GaussianMixture.gaussian([0.3, 0.1], [[1.0, 0.2], [0.2, 0.5]])
    assert gaussian_kl(a, a) == 0.0
    assert gaussian_kl(GaussianMixture.gaussian([1.0], [[1.0]]), GaussianMixture.gaussian([0.0], [[1.0]])) == 0.5
    b = GaussianMixture.gaussian([0.3, 0.2], [[1.0, 0.2], [0.2, 0.5]])
    assert gaussian_kl(a, b) > 0


def test_gaussian_kl_monte_carlo():
    p = GaussianMixture.gaussian([0.5, -0.2], [[1.0, 0.3], [0.3, 0.6]])
    q = GaussianMixture.gaussian([0.0, 0.4], [[1.5, -0.2], [-0.2, 0.9]])
    x = sample(p, 1_000_000, 4)
    r = log_density(p, x) - log_density(q, x)
    se = r.std(ddof=1) / math.sqrt(x.shape[0])
    assert abs(r.mean() - gaussian_kl(p, q)) <= 3 * se


def test_gaussian_kl_rejects_mixtures():
    with pytest.raises(ValueError):
        gaussian_kl(TWO, TWO)


@pytest.mark.parametrize(
    "args",
    [
        ([0.5, 0.6], [[0.0], [1.0]], [[1.0], [1.0]]),
        ([-0.5, 1.5], [[0.0], [1.0]], [[1.0], [1.0]]),
        ([1.0], [[0.0, 0.0]], [[[1.0, 2.0], [2.0, 1.0]]]),
        ([1.0], [[0.0, 0.0]], [[[1.0, 0.1], [0.0, 1.0]]]),
        ([1.0], [[0.0, 0.0]], [[1.0, 1.0, 1.0]]),
    ],
)
def test_invalid_mixtures(args):
    with pytest.raises(ValueError):
        GaussianMixture(*args)


def test_sample_rejects_nonpositive_n():
    with pytest.raises(ValueError):
        sample(TWO, 0, 0)
