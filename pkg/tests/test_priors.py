import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from sklearn.mixture import GaussianMixture

from orchamp.errors import ArgError, DegeneracyWarning, FitError, SingularError
from orchamp.priors import (
    DiscretePrior,
    GaussianMixturePrior,
    LinearGaussianChannel,
    affine_transform,
    build_npmle_support,
    default_components,
    fit_gmm_deconvolution,
    fit_npmle_weights,
    gmm_loglik,
    marginalize_prior,
    prior_from_dict,
    prior_to_dict,
    prune,
    sample_prior,
)

# EM ascent is exact in real arithmetic; allow only float roundoff.
ROUNDOFF = 1e-10


def assert_ascent(ll):
    ll = np.asarray(ll)
    slack = ROUNDOFF * np.maximum(np.abs(ll[:-1]), 1.0)
    assert np.all(np.diff(ll) >= -slack), np.diff(ll).min()


def random_gmm(rng, K, d):
    means = 2.0 * rng.standard_normal((K, d))
    covs = []
    for _ in range(K):
        G = rng.standard_normal((d, d))
        covs.append(G @ G.T / d + 0.2 * np.eye(d))
    return GaussianMixturePrior(rng.dirichlet(np.ones(K)), means, np.array(covs))


def test_prior_validation():
    with pytest.raises(ArgError):
        GaussianMixturePrior([0.5, 0.6], [[0.0], [1.0]], [[[1.0]], [[1.0]]])
    with pytest.raises(ArgError):
        LinearGaussianChannel(np.eye(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ArgError):
        LinearGaussianChannel(np.eye(2), np.diag([1.0, -1.0]))


def test_two_component_recovery():
    rng = np.random.default_rng(0)
    z = np.where(rng.random(5000) < 0.5, -3.0, 3.0) + rng.standard_normal(5000)
    ch = LinearGaussianChannel(np.eye(1), 1e-6 * np.eye(1))
    fit = fit_gmm_deconvolution(z[:, None], ch, 2, seed=1)
    assert np.allclose(np.sort(fit.means[:, 0]), [-3.0, 3.0], atol=0.1)
    assert_ascent(fit.fit_info.loglik)


def test_single_component_closed_form():
    rng = np.random.default_rng(1)
    sig2 = 0.5
    Y = rng.multivariate_normal([1.0, -2.0], [[2.0, 0.3], [0.3, 1.5]], size=3000)
    ch = LinearGaussianChannel(np.eye(2), sig2 * np.eye(2))
    fit = fit_gmm_deconvolution(Y, ch, 1, seed=0, tol=1e-14, max_iter=5000)
    S = np.cov(Y, rowvar=False, bias=True)
    np.testing.assert_allclose(fit.means[0], Y.mean(axis=0), atol=1e-10)
    np.testing.assert_allclose(fit.covs[0], S - sig2 * np.eye(2), atol=1e-6)


def test_single_component_floored():
    rng = np.random.default_rng(2)
    Y = rng.standard_normal((2000, 1))
    # sample variance < B, so the unconstrained MLE is at zero; EM heads there
    # sublinearly, hence a floor that binds well before convergence.
    ch = LinearGaussianChannel(np.eye(1), 4.0 * np.eye(1))
    floor = 0.2
    fit = fit_gmm_deconvolution(Y, ch, 1, seed=0, cov_floor=floor)
    assert abs(fit.covs[0, 0, 0] - floor) < 1e-12


@pytest.mark.filterwarnings("ignore::sklearn.exceptions.ConvergenceWarning")
def test_reduces_to_plain_gmm():
    """B -> 0 with invertible square A: the fit on Y equals plain GMM EM on A^{-1} Y."""
    rng = np.random.default_rng(3)
    truth = random_gmm(rng, 3, 2)
    Z = sample_prior(truth, 3000, rng)
    A = np.array([[1.5, 0.4], [-0.3, 0.8]])
    Y = Z @ A.T
    ch = LinearGaussianChannel(A, 1e-13 * np.eye(2))
    init = GaussianMixturePrior([0.3, 0.3, 0.4], truth.means + 0.3, truth.covs * 1.2)
    fit = fit_gmm_deconvolution(Y, ch, 3, init=init, max_iter=100, tol=-1.0, cov_floor=1e-12)
    ref = GaussianMixture(3, covariance_type="full", tol=0.0, max_iter=100, reg_covar=0.0,
                          weights_init=init.weights, means_init=init.means,
                          precisions_init=np.linalg.inv(init.covs))
    ref.fit(Z)
    assert np.max(np.abs(fit.means - ref.means_)) < 1e-6
    assert np.max(np.abs(fit.weights - ref.weights_)) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_gmm_em_ascent(seed):
    rng = np.random.default_rng(seed)
    d, q = 2, 3
    truth = random_gmm(rng, 3, d)
    A = rng.standard_normal((q, d))
    G = rng.standard_normal((q, q))
    B = G @ G.T / q + 0.3 * np.eye(q)
    ch = LinearGaussianChannel(A, B)
    Y = sample_prior(truth, 600, rng) @ A.T + rng.multivariate_normal(np.zeros(q), B, 600)
    fit = fit_gmm_deconvolution(Y, ch, 4, seed=seed, max_iter=200)
    assert_ascent(fit.fit_info.loglik)
    assert abs(fit.fit_info.loglik[-1] - gmm_loglik(Y, ch, fit)) < 1e-8 * abs(fit.fit_info.loglik[-1])


@pytest.mark.parametrize("seed", range(20))
def test_npmle_em_ascent(seed):
    rng = np.random.default_rng(100 + seed)
    Y = rng.standard_normal((300, 2)) + rng.choice([-2.0, 2.0], size=(300, 1))
    ch = LinearGaussianChannel(np.eye(2), 0.5 * np.eye(2))
    atoms = build_npmle_support([np.eye(2)], [Y])
    fit = fit_npmle_weights(Y, ch, atoms, max_iter=100, tol=0.0)
    assert_ascent(fit.fit_info.loglik)
    assert abs(fit.weights.sum() - 1) < 1e-12


def test_gmm_k_too_large():
    with pytest.raises(FitError):
        fit_gmm_deconvolution(np.zeros((3, 1)), LinearGaussianChannel(np.eye(1), np.eye(1)), 4)


def test_identical_responsibilities_warn():
    ch = LinearGaussianChannel(np.zeros((1, 1)), np.eye(1))
    Y = np.random.default_rng(0).standard_normal((50, 1))
    with pytest.warns(DegeneracyWarning):
        fit_gmm_deconvolution(Y, ch, 2, seed=0, max_iter=5,
                              init=GaussianMixturePrior([0.5, 0.5], [[-1.0], [1.0]], [[[1.0]], [[1.0]]]))


def test_gmm_deterministic():
    Y = np.random.default_rng(4).standard_normal((400, 1)) * 2
    ch = LinearGaussianChannel(np.eye(1), np.eye(1))
    a = fit_gmm_deconvolution(Y, ch, 3, seed=9)
    b = fit_gmm_deconvolution(Y, ch, 3, seed=9)
    assert a == b


def test_npmle_likelihood_dominates():
    Y = 1.0 + 0.05 * np.random.default_rng(5).standard_normal((200, 1))
    ch = LinearGaussianChannel(np.eye(1), 0.01 * np.eye(1))
    fit = fit_npmle_weights(Y, ch, np.array([[-1.0], [1.0]]))
    assert fit.weights[1] >= 0.99


def test_npmle_symmetric_step():
    Y = np.array([[-1.0], [1.0], [-0.3], [0.3]])
    ch = LinearGaussianChannel(np.eye(1), np.eye(1))
    fit = fit_npmle_weights(Y, ch, np.array([[-1.0], [1.0]]), max_iter=1)
    np.testing.assert_allclose(fit.weights, [0.5, 0.5], atol=1e-15)


def test_support_examples():
    np.testing.assert_allclose(build_npmle_support([[[2.0]]], [[[4.0]]]), [[2.0]])
    U = np.array([[1.0], [2.0], [3.0]])
    X = np.array([[0.5], [0.1], [0.7]])
    atoms = build_npmle_support([np.eye(1), np.eye(1)], [U, X])
    np.testing.assert_array_equal(atoms, np.hstack([U, X]))
    assert atoms.shape[0] == 3
    with pytest.raises(SingularError):
        build_npmle_support([np.zeros((1, 1))], [U])


def test_prune():
    p = prune(DiscretePrior(np.array([[0.0], [1.0]]), np.array([1.0, 0.0])))
    assert p.n_components == 1


def test_marginalize_examples():
    g = GaussianMixturePrior([0.4, 0.6], [[1.0, 2.0], [3.0, 4.0]],
                             [np.diag([0.5, 0.7]), np.diag([0.2, 0.9])])
    assert marginalize_prior(g, [0, 1]) == g
    m = marginalize_prior(g, [0])
    np.testing.assert_array_equal(m.means[:, 0], [1.0, 3.0])
    np.testing.assert_array_equal(m.covs[:, 0, 0], [0.5, 0.2])
    d = DiscretePrior(np.array([[0.0, 0.0], [0.0, 1.0]]), np.array([0.3, 0.7]))
    md = marginalize_prior(d, [0])
    assert md.n_components == 1 and abs(md.weights[0] - 1.0) < 1e-15 and md.atoms[0, 0] == 0.0
    with pytest.raises(ArgError):
        marginalize_prior(g, [])


def test_marginalize_then_sample():
    rng = np.random.default_rng(6)
    g = random_gmm(rng, 3, 3)
    a = sample_prior(marginalize_prior(g, [1]), 100_000, 1)[:, 0]
    b = sample_prior(g, 100_000, 2)[:, 1]
    assert stats.ks_2samp(a, b).statistic < 0.02


def test_sample_examples():
    d = DiscretePrior(np.array([[1.5, -2.0]]), np.array([1.0]))
    assert np.all(sample_prior(d, 10, 0) == [1.5, -2.0])
    g = GaussianMixturePrior([1.0], [[0.0]], [[[1.0]]])
    assert np.array_equal(sample_prior(g, 100, 3), sample_prior(g, 100, 3))
    x = sample_prior(g, 1_000_000, 4)
    assert 0.99 <= x.var() <= 1.01


def test_sample_mean_clt():
    rng = np.random.default_rng(7)
    g = random_gmm(rng, 3, 2)
    x = sample_prior(g, 1_000_000, 8)
    sd = np.sqrt(np.diag(g.covariance()))
    assert np.all(np.abs(x.mean(axis=0) - g.mean()) < 4 * sd / 1000)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 10_000))
def test_affine_single_component(K, d, seed):
    rng = np.random.default_rng(seed)
    g = random_gmm(rng, 1, d)
    T = rng.standard_normal((d, d))
    s = rng.standard_normal(d)
    t = affine_transform(g, T, s)
    np.testing.assert_allclose(t.mean(), T @ g.mean() + s, atol=1e-10)
    np.testing.assert_allclose(t.covariance(), T @ g.covariance() @ T.T, atol=1e-10)


def test_serialization_exact():
    rng = np.random.default_rng(9)
    g = random_gmm(rng, 3, 2)
    assert prior_from_dict(prior_to_dict(g)) == g
    d = DiscretePrior(rng.standard_normal((4, 2)), rng.dirichlet(np.ones(4)))
    assert prior_from_dict(prior_to_dict(d)) == d


def test_default_components():
    assert default_components(4000) == 16
    assert default_components(1) == 1
