"""Empirical-Bayes prior classes and their maximum-likelihood fits.

Two prior classes are supported, both observed through a linear Gaussian
channel ``y = A u + e`` with ``e ~ N(0, B)``:

* finite Gaussian mixtures, fitted by EM on the deconvolved marginal
  ``y ~ sum_k pi_k N(A m_k, A C_k A^T + B)``;
* discrete priors on a fixed support (NPMLE), fitted by EM on the weights.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ._linalg import jittered_cholesky, symmetrize
from .errors import ArgError, DegeneracyWarning, FitError, SingularError
from .rng import as_generator

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class FitInfo:
    """Diagnostics from an EM fit. ``loglik`` holds the marginal log-likelihood
    of the parameters at the start of every iteration, plus the final one."""

    loglik: list
    n_iter: int
    converged: bool


@dataclass(eq=False)
class GaussianMixturePrior:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    fit_info: FitInfo | None = field(default=None, repr=False)

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = np.asarray(self.means, dtype=float)
        if m.ndim == 1:
            m = m[:, None]
        c = np.asarray(self.covs, dtype=float)
        k, d = m.shape
        if c.ndim == 1 and d == 1:
            c = c.reshape(k, 1, 1)
        elif c.ndim == 2 and d == 1:
            c = c.reshape(k, 1, 1)
        if w.shape != (k,) or c.shape != (k, d, d):
            raise ArgError(f"inconsistent mixture shapes: weights {w.shape}, means {m.shape}, covs {c.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ArgError("mixture weights must be nonnegative and sum to one")
        self.weights = w / w.sum()
        self.means = m
        self.covs = 0.5 * (c + np.swapaxes(c, 1, 2))

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.means.shape[0]

    def mean(self):
        return self.weights @ self.means

    def second_moment(self):
        outer = np.einsum("ka,kb->kab", self.means, self.means)
        return np.einsum("k,kab->ab", self.weights, self.covs + outer)

    def covariance(self):
        mu = self.mean()
        return symmetrize(self.second_moment() - np.outer(mu, mu))

    def __eq__(self, other):
        if not isinstance(other, GaussianMixturePrior):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.covs, other.covs)
        )


@dataclass(eq=False)
class DiscretePrior:
    atoms: np.ndarray
    weights: np.ndarray
    fit_info: FitInfo | None = field(default=None, repr=False)

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if w.shape != (a.shape[0],):
            raise ArgError(f"{a.shape[0]} atoms but {w.shape} weights")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ArgError("atom weights must be nonnegative and sum to one")
        self.atoms = a
        self.weights = w / w.sum()

    @property
    def dim(self):
        return self.atoms.shape[1]

    @property
    def n_components(self):
        return self.atoms.shape[0]

    # Discrete priors behave like mixtures of point masses.
    @property
    def means(self):
        return self.atoms

    @property
    def covs(self):
        return np.zeros((self.n_components, self.dim, self.dim))

    def mean(self):
        return self.weights @ self.atoms

    def second_moment(self):
        return (self.atoms * self.weights[:, None]).T @ self.atoms

    def covariance(self):
        mu = self.mean()
        return symmetrize(self.second_moment() - np.outer(mu, mu))

    def __eq__(self, other):
        if not isinstance(other, DiscretePrior):
            return NotImplemented
        return np.array_equal(self.atoms, other.atoms) and np.array_equal(self.weights, other.weights)


@dataclass
class LinearGaussianChannel:
    """Observation model ``y = A u + N(0, B)``."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if B.shape != (A.shape[0], A.shape[0]):
            raise ArgError(f"noise covariance {B.shape} does not match design {A.shape}")
        if np.max(np.abs(B - B.T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(B))):
            raise ArgError("noise covariance must be symmetric")
        B = symmetrize(B)
        if B.size and np.linalg.eigvalsh(B)[0] <= 0:
            raise ArgError("noise covariance must be positive definite")
        self.A = A
        self.B = B

    @property
    def obs_dim(self):
        return self.A.shape[0]

    @property
    def latent_dim(self):
        return self.A.shape[1]


def _check_channel(channel, prior_dim, Y=None):
    if channel.latent_dim != prior_dim:
        raise ArgError(f"channel latent dim {channel.latent_dim} != prior dim {prior_dim}")
    if Y is not None and Y.shape[1] != channel.obs_dim:
        raise ArgError(f"observations have {Y.shape[1]} columns, channel expects {channel.obs_dim}")


def _as_rows(Y):
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    return Y


# ---------------------------------------------------------------------------
# Gaussian-mixture deconvolution


def _whiten(Y, A):
    return Y @ np.linalg.pinv(A).T


def default_cov_floor(Y, channel):
    Z = _whiten(Y, channel.A)
    d = Z.shape[1]
    cov = np.atleast_2d(np.cov(Z, rowvar=False)) if Z.shape[0] > 1 else np.eye(d)
    return 1e-6 * max(np.trace(cov) / d, np.finfo(float).tiny)


def _kmeans_init(Y, channel, K, rng, cov_floor):
    from sklearn.cluster import KMeans

    Z = _whiten(Y, channel.A)
    n, d = Z.shape
    global_cov = np.atleast_2d(np.cov(Z, rowvar=False)) if n > 1 else np.eye(d)
    if K == 1:
        labels = np.zeros(n, dtype=int)
        centers = Z.mean(axis=0, keepdims=True)
    else:
        km = KMeans(n_clusters=K, init="k-means++", n_init=1, random_state=int(rng.integers(2**31 - 1)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            labels = km.fit_predict(Z)
        centers = km.cluster_centers_
    weights = np.bincount(labels, minlength=K).astype(float)
    covs = np.empty((K, d, d))
    for k in range(K):
        members = Z[labels == k]
        if members.shape[0] > d:
            covs[k] = np.atleast_2d(np.cov(members, rowvar=False))
        else:
            covs[k] = global_cov / K
        covs[k] = _floor_eigenvalues(covs[k], cov_floor)
    weights = np.maximum(weights, 1.0)
    return GaussianMixturePrior(weights / weights.sum(), centers, covs)


def _floor_eigenvalues(c, floor):
    w, q = np.linalg.eigh(symmetrize(c))
    if w[0] >= floor:
        return symmetrize(c)
    return symmetrize((q * np.maximum(w, floor)) @ q.T)


def _marginal_terms(Y, A, B, weights, means, covs):
    """Per-component marginal log densities and the pieces EM needs."""
    K, d = means.shape
    q = A.shape[0]
    S = np.einsum("ia,kab,jb->kij", A, covs, A) + B[None]
    chol = np.stack([jittered_cholesky(S[k]) for k in range(K)])
    eye = np.eye(q)
    Sinv = np.stack([np.linalg.solve(chol[k].T, np.linalg.solve(chol[k], eye)) for k in range(K)])
    Sinv = 0.5 * (Sinv + np.swapaxes(Sinv, 1, 2))
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    R = Y[:, None, :] - (means @ A.T)[None]
    SinvR = np.einsum("kab,nkb->nka", Sinv, R)
    maha = np.einsum("nka,nka->nk", R, SinvR)
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    logp = logw[None] - 0.5 * (q * LOG_2PI + logdet[None] + maha)
    return logp, R, Sinv


def gmm_loglik(Y, channel, prior):
    """Marginal log-likelihood of ``Y`` under ``prior`` seen through ``channel``."""
    Y = _as_rows(Y)
    logp, _, _ = _marginal_terms(Y, channel.A, channel.B, prior.weights, prior.means, prior.covs)
    return float(logsumexp(logp, axis=1).sum())


def fit_gmm_deconvolution(Y, channel, K, seed=0, max_iter=500, tol=1e-8, init=None, cov_floor=None):
    """Fit a ``K``-component Gaussian mixture prior by EM under a Gaussian channel.

    Parameters
    ----------
    Y : (n, obs_dim) array
        Noisy pseudo-observations.
    channel : LinearGaussianChannel
    K : int
    seed : int or Generator
        Seeds the k-means++ initialisation on ``A^+ Y``.
    max_iter, tol : stopping rule; ``tol`` is on the relative log-likelihood gain.
    init : GaussianMixturePrior, optional
        Starting point; replaces the k-means++ initialisation.
    cov_floor : float, optional
        Lower bound on every component covariance eigenvalue.

    Returns
    -------
    GaussianMixturePrior with ``fit_info`` populated.
    """
    Y = _as_rows(Y)
    n = Y.shape[0]
    _check_channel(channel, channel.latent_dim, Y)
    if K < 1 or K > n:
        raise FitError(f"need 1 <= K <= n, got K={K}, n={n}")
    if cov_floor is None:
        cov_floor = default_cov_floor(Y, channel)
    A, B = channel.A, channel.B
    if init is None:
        init = _kmeans_init(Y, channel, K, as_generator(seed), cov_floor)
    elif init.n_components != K or init.dim != channel.latent_dim:
        raise ArgError("init prior does not match K and channel latent dim")
    weights = init.weights.copy()
    means = init.means.copy()
    covs = init.covs.copy()

    history = []
    converged = False
    resp = None
    for it in range(max_iter + 1):
        logp, R, Sinv = _marginal_terms(Y, A, B, weights, means, covs)
        lse = logsumexp(logp, axis=1)
        ll = float(lse.sum())
        history.append(ll)
        resp = np.exp(logp - lse[:, None])
        if it > 0 and (ll - history[-2]) < tol * abs(history[-2]):
            converged = True
            break
        if it == max_iter:
            break
        # E-step: per-component posterior of the latent vector.
        G = np.einsum("kab,jb,kjc->kac", covs, A, Sinv)
        post_mean = means[None] + np.einsum("kac,nkc->nka", G, R)
        post_cov = covs - np.einsum("kac,cb,kbd->kad", G, A, covs)
        nk = resp.sum(axis=0)
        live = nk > 1e-10 * n
        weights = nk / n
        for k in np.flatnonzero(live):
            rk = resp[:, k]
            mk = rk @ post_mean[:, k, :] / nk[k]
            dev = post_mean[:, k, :] - mk
            scatter = (dev * rk[:, None]).T @ dev / nk[k]
            means[k] = mk
            covs[k] = _floor_eigenvalues(scatter + post_cov[k], cov_floor)

    if K > 1 and resp is not None and np.max(np.ptp(resp, axis=1)) < 1e-9:
        warnings.warn("all mixture responsibilities are identical; components are not identifiable",
                      DegeneracyWarning, stacklevel=2)
    prior = GaussianMixturePrior(weights / weights.sum(), means, covs)
    prior.fit_info = FitInfo(loglik=history, n_iter=len(history) - 1, converged=converged)
    return prior


# ---------------------------------------------------------------------------
# NPMLE on a fixed support


def _point_mass_loglik(Y, channel, atoms):
    """``(n, S)`` matrix of ``log N(y_i; A s_k, B)``."""
    L = jittered_cholesky(channel.B)
    q = channel.obs_dim
    Yw = np.linalg.solve(L, Y.T).T
    Sw = np.linalg.solve(L, (atoms @ channel.A.T).T).T
    maha = (Yw**2).sum(1)[:, None] + (Sw**2).sum(1)[None] - 2.0 * Yw @ Sw.T
    maha = np.maximum(maha, 0.0)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return -0.5 * (q * LOG_2PI + logdet + maha)


def fit_npmle_weights(Y, channel, atoms, seed=None, max_iter=500, tol=1e-8, init_weights=None):
    """Fixed-support EM for the mixing weights of a discrete prior.

    The fit is deterministic; ``seed`` is accepted so both prior fitters share
    a call signature.
    """
    Y = _as_rows(Y)
    atoms = _as_rows(atoms)
    _check_channel(channel, atoms.shape[1], Y)
    S = atoms.shape[0]
    logL = _point_mass_loglik(Y, channel, atoms)
    row_max = logL.max(axis=1)
    F = np.exp(logL - row_max[:, None])
    n = Y.shape[0]
    w = np.full(S, 1.0 / S) if init_weights is None else np.asarray(init_weights, dtype=float).copy()
    history = []
    converged = False
    for it in range(max_iter + 1):
        f = F @ w
        ll = float(np.log(f).sum() + row_max.sum())
        history.append(ll)
        if it > 0 and (ll - history[-2]) < tol * abs(history[-2]):
            converged = True
            break
        if it == max_iter:
            break
        w = w * (F.T @ (1.0 / f)) / n
        w /= w.sum()
    prior = DiscretePrior(atoms, w)
    prior.fit_info = FitInfo(loglik=history, n_iter=len(history) - 1, converged=converged)
    return prior


def prune(prior, threshold=1e-14):
    """Drop atoms whose weight fell below ``threshold`` (renormalising the rest)."""
    keep = prior.weights >= threshold
    if keep.all():
        return prior
    out = DiscretePrior(prior.atoms[keep], prior.weights[keep] / prior.weights[keep].sum())
    out.fit_info = prior.fit_info
    return out


def build_npmle_support(scales, pseudo_obs):
    """Support points for the NPMLE: rows of ``[Y_1 S_1^{-T}, ..., Y_J S_J^{-T}]``.

    ``scales`` are the per-block signal scalings (``S^{L,pc}`` for high-dimensional
    blocks, ``L`` for low-dimensional ones) and ``pseudo_obs`` the matching
    ``n x d_j`` observation blocks. Duplicate rows are merged.
    """
    if len(scales) != len(pseudo_obs) or not scales:
        raise ArgError("need one scale matrix per observation block")
    cols = []
    for S, Yb in zip(scales, pseudo_obs):
        S = np.atleast_2d(np.asarray(S, dtype=float))
        Yb = _as_rows(Yb)
        if S.shape != (Yb.shape[1], Yb.shape[1]):
            raise ArgError(f"scale {S.shape} does not match block with {Yb.shape[1]} columns")
        if np.linalg.matrix_rank(S) < S.shape[0]:
            raise SingularError("scale matrix is singular; cannot whiten pseudo-observations")
        cols.append(np.linalg.solve(S, Yb.T).T)
    n = {c.shape[0] for c in cols}
    if len(n) != 1:
        raise ArgError("observation blocks must share the same rows")
    atoms = np.hstack(cols)
    _, first = np.unique(atoms, axis=0, return_index=True)
    return atoms[np.sort(first)]


# ---------------------------------------------------------------------------
# Manipulation


def marginalize_prior(prior, coords):
    coords = [int(c) for c in np.atleast_1d(coords)]
    if not coords:
        raise ArgError("coordinate set must be nonempty")
    if min(coords) < 0 or max(coords) >= prior.dim:
        raise ArgError(f"coordinates {coords} out of range for dim {prior.dim}")
    if isinstance(prior, GaussianMixturePrior):
        ix = np.ix_(range(prior.n_components), coords, coords)
        return GaussianMixturePrior(prior.weights.copy(), prior.means[:, coords], prior.covs[ix])
    atoms = prior.atoms[:, coords]
    uniq, inverse = np.unique(atoms, axis=0, return_inverse=True)
    weights = np.bincount(inverse.ravel(), weights=prior.weights, minlength=uniq.shape[0])
    return DiscretePrior(uniq, weights)


def affine_transform(prior, T, shift=None):
    """Law of ``T u + shift`` for ``u ~ prior``."""
    T = np.atleast_2d(np.asarray(T, dtype=float))
    shift = np.zeros(T.shape[0]) if shift is None else np.asarray(shift, dtype=float)
    if isinstance(prior, GaussianMixturePrior):
        covs = np.einsum("ia,kab,jb->kij", T, prior.covs, T)
        return GaussianMixturePrior(prior.weights.copy(), prior.means @ T.T + shift, covs)
    return DiscretePrior(prior.atoms @ T.T + shift, prior.weights.copy())


def sample_prior(prior, n, seed=0):
    """Draw ``n`` iid rows from ``prior``."""
    if n < 1:
        raise ArgError("n must be positive")
    rng = as_generator(seed)
    comp = rng.choice(prior.n_components, size=n, p=prior.weights)
    if isinstance(prior, DiscretePrior):
        return prior.atoms[comp].copy()
    chol = np.stack([jittered_cholesky(c) if np.any(c) else np.zeros_like(c) for c in prior.covs])
    z = rng.standard_normal((n, prior.dim))
    return prior.means[comp] + np.einsum("nab,nb->na", chol[comp], z)


def default_components(n):
    """Rule-of-thumb mixture size: the cube root of the sample size."""
    return max(1, int(round(n ** (1.0 / 3.0))))


# ---------------------------------------------------------------------------
# Serialization


def prior_to_dict(prior):
    if isinstance(prior, GaussianMixturePrior):
        return {
            "kind": "gmm",
            "weights": prior.weights.tolist(),
            "means": prior.means.tolist(),
            "covariances": prior.covs.tolist(),
        }
    if isinstance(prior, DiscretePrior):
        return {"kind": "discrete", "atoms": prior.atoms.tolist(), "weights": prior.weights.tolist()}
    raise ArgError(f"unknown prior type {type(prior).__name__}")


def prior_from_dict(d):
    kind = d["kind"]
    if kind == "gmm":
        w = np.asarray(d["weights"], dtype=float)
        m = np.asarray(d["means"], dtype=float).reshape(len(w), -1)
        dim = m.shape[1]
        c = np.asarray(d["covariances"], dtype=float).reshape(len(w), dim, dim)
        prior = GaussianMixturePrior.__new__(GaussianMixturePrior)
        # bypass renormalisation so round-trips are bit-exact
        prior.weights, prior.means, prior.covs, prior.fit_info = w, m, c, None
        return prior
    if kind == "discrete":
        w = np.asarray(d["weights"], dtype=float)
        a = np.asarray(d["atoms"], dtype=float).reshape(len(w), -1)
        prior = DiscretePrior.__new__(DiscretePrior)
        prior.atoms, prior.weights, prior.fit_info = a, w, None
        return prior
    raise KeyError(f"unknown prior kind {kind!r}")
