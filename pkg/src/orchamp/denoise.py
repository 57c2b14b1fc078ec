"""Posterior-mean denoisers under mixture priors and linear Gaussian channels.

For a prior ``sum_k pi_k N(m_k, C_k)`` (point masses have ``C_k = 0``) and an
observation ``y = A u + N(0, B)`` the posterior is again a mixture with

* weights ``pi_k(y) ~ pi_k N(y; A m_k, S_k)``, ``S_k = A C_k A^T + B``,
* means ``mu_k(y) = m_k + G_k (y - A m_k)``, ``G_k = C_k A^T S_k^{-1}``,
* covariances ``C_k - G_k A C_k``.

The Jacobian of the posterior mean follows by differentiating the weights:
``sum_k pi_k G_k + sum_k pi_k mu_k (eta_k - eta_bar)^T`` with
``eta_k = -S_k^{-1}(y - A m_k)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ._linalg import jittered_cholesky, sym_sqrt
from .errors import ArgError
from .priors import LOG_2PI, DiscretePrior
from .rng import as_generator

# Upper bound on the number of floats held by one chunk of (rows x comps x dim) work arrays.
CHUNK_ENTRIES = 2_000_000


@dataclass
class PosteriorMixture:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)
    gains: np.ndarray  # (K, d, q)

    def mean(self):
        return self.weights @ self.means


class _Prepared:
    """Per-(channel, prior) quantities that do not depend on ``y``."""

    def __init__(self, channel, prior):
        if channel.latent_dim != prior.dim:
            raise ArgError(f"channel latent dim {channel.latent_dim} != prior dim {prior.dim}")
        A, B = channel.A, channel.B
        self.A = A
        self.q, self.d = A.shape
        self.means = prior.means
        self.Am = prior.means @ A.T
        with np.errstate(divide="ignore"):
            self.logw = np.log(prior.weights)
        self.discrete = isinstance(prior, DiscretePrior)
        K = prior.n_components
        if self.discrete:
            # All components share S = B and have zero gain.
            L = jittered_cholesky(B)
            Binv = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(self.q)))
            self.Sinv = 0.5 * (Binv + Binv.T)[None]
            self.logdet = np.full(K, 2.0 * np.log(np.diag(L)).sum())
            self.gains = np.zeros((K, self.d, self.q))
            self.post_covs = np.zeros((K, self.d, self.d))
        else:
            covs = prior.covs
            S = np.einsum("ia,kab,jb->kij", A, covs, A) + B[None]
            chol = [jittered_cholesky(S[k]) for k in range(K)]
            eye = np.eye(self.q)
            Sinv = np.stack([np.linalg.solve(c.T, np.linalg.solve(c, eye)) for c in chol])
            self.Sinv = 0.5 * (Sinv + np.swapaxes(Sinv, 1, 2))
            self.logdet = np.array([2.0 * np.log(np.diag(c)).sum() for c in chol])
            self.gains = np.einsum("kab,jb,kjc->kac", covs, A, self.Sinv)
            pc = covs - np.einsum("kac,cb,kbd->kad", self.gains, A, covs)
            self.post_covs = 0.5 * (pc + np.swapaxes(pc, 1, 2))
        self.K = K

    def chunk_rows(self):
        return max(1, CHUNK_ENTRIES // max(1, self.K * max(self.q, self.d)))

    def terms(self, Y):
        """Posterior weights, component means and ``eta`` for a block of rows."""
        R = Y[:, None, :] - self.Am[None]  # (n, K, q)
        if self.discrete:
            SinvR = R @ self.Sinv[0]
        else:
            SinvR = np.einsum("kab,nkb->nka", self.Sinv, R)
        maha = np.einsum("nka,nka->nk", R, SinvR)
        logp = self.logw[None] - 0.5 * (self.q * LOG_2PI + self.logdet[None] + maha)
        lse = logsumexp(logp, axis=1)
        w = np.exp(logp - lse[:, None])
        if self.discrete:
            mu = np.broadcast_to(self.means[None], (Y.shape[0], self.K, self.d))
        else:
            mu = self.means[None] + np.einsum("kac,nkc->nka", self.gains, R)
        return w, mu, -SinvR, lse


def _rows(Y, q):
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y.reshape(-1, q) if q > 1 or Y.size == 0 else Y[:, None]
    if Y.ndim != 2 or Y.shape[1] != q:
        raise ArgError(f"observations must have {q} columns")
    return Y


def _vector(y, q):
    y = np.atleast_1d(np.asarray(y, dtype=float)).ravel()
    if y.shape != (q,):
        raise ArgError(f"observation must have length {q}, got {y.shape}")
    return y


def posterior(channel, prior, y):
    """Full posterior mixture of the latent vector given one observation."""
    prep = _Prepared(channel, prior)
    y = _vector(y, prep.q)
    w, mu, _, _ = prep.terms(y[None])
    return PosteriorMixture(w[0], np.array(mu[0]), prep.post_covs.copy(), prep.gains.copy())


def denoise_mean(channel, prior, y):
    """Posterior mean ``E[u | y]``."""
    prep = _Prepared(channel, prior)
    y = _vector(y, prep.q)
    w, mu, _, _ = prep.terms(y[None])
    return w[0] @ mu[0]


def denoise_jacobian(channel, prior, y):
    """Jacobian of ``denoise_mean`` with respect to ``y`` (latent x obs)."""
    prep = _Prepared(channel, prior)
    y = _vector(y, prep.q)
    w, mu, eta, _ = prep.terms(y[None])
    w, mu, eta = w[0], mu[0], eta[0]
    eta_c = eta - w @ eta
    return np.einsum("k,kab->ab", w, prep.gains) + np.einsum("k,ka,kb->ab", w, mu, eta_c)


def denoise_rows(channel, prior, Y):
    """Posterior means for every row of ``Y``."""
    prep = _Prepared(channel, prior)
    Y = _rows(Y, prep.q)
    out = np.empty((Y.shape[0], prep.d))
    step = prep.chunk_rows()
    for s in range(0, Y.shape[0], step):
        w, mu, _, _ = prep.terms(Y[s:s + step])
        out[s:s + step] = np.einsum("nk,nka->na", w, mu)
    return out


def rowwise_denoise(channel, prior, Y, out_coords, in_coords=None):
    """Apply the denoiser to every row and average the selected Jacobian block.

    Parameters
    ----------
    Y : (n, obs_dim) array
    out_coords : index block of latent coordinates to return.
    in_coords : index block of observation coordinates to differentiate
        against; defaults to ``out_coords`` (matching latent/obs layouts).

    Returns
    -------
    means : (n, len(out_coords)) array
    J_bar : (len(out_coords), len(in_coords)) row-averaged sub-Jacobian
    """
    out_coords = np.atleast_1d(np.asarray(out_coords, dtype=int))
    in_coords = out_coords if in_coords is None else in_coords
    means, (J,) = rowwise_denoise_blocks(channel, prior, Y, [(out_coords, in_coords)])
    return means[:, out_coords], J


def rowwise_denoise_blocks(channel, prior, Y, blocks):
    """Posterior means of all latent coordinates plus several averaged Jacobian blocks.

    ``blocks`` is a list of ``(out_coords, in_coords)`` pairs; one pass over
    the rows serves all of them.
    """
    prep = _Prepared(channel, prior)
    Y = _rows(Y, prep.q)
    n = Y.shape[0]
    if n == 0:
        raise ArgError("no rows to denoise")
    blocks = [(np.atleast_1d(np.asarray(o, dtype=int)), np.atleast_1d(np.asarray(i, dtype=int)))
              for o, i in blocks]
    means = np.empty((n, prep.d))
    sums = [np.zeros((o.size, i.size)) for o, i in blocks]
    step = prep.chunk_rows()
    for s in range(0, n, step):
        w, mu, eta, _ = prep.terms(Y[s:s + step])
        means[s:s + step] = np.einsum("nk,nka->na", w, mu)
        eta_c = eta - np.einsum("nk,nkb->nb", w, eta)[:, None, :]
        wk = w.sum(axis=0)
        for (o, i), acc in zip(blocks, sums):
            acc += np.einsum("k,kab->ab", wk, prep.gains[:, o][:, :, i])
            acc += np.einsum("nk,nka,nkb->ab", w, mu[:, :, o], eta_c[:, :, i])
    return means, [acc / n for acc in sums]


def log_marginal(channel, prior, Y):
    """Log marginal density of each row of ``Y``."""
    prep = _Prepared(channel, prior)
    Y = _rows(Y, prep.q)
    out = np.empty(Y.shape[0])
    step = prep.chunk_rows()
    for s in range(0, Y.shape[0], step):
        out[s:s + step] = prep.terms(Y[s:s + step])[3]
    return out


def posterior_sample(channel, prior, y, M, seed=0):
    """Exact draws from the posterior: pick a component, then sample it."""
    if M < 1:
        raise ArgError("M must be positive")
    post = posterior(channel, prior, y)
    rng = as_generator(seed)
    comp = rng.choice(post.weights.size, size=M, p=post.weights / post.weights.sum())
    if isinstance(prior, DiscretePrior):
        return post.means[comp].copy()
    roots = np.stack([sym_sqrt(c) for c in post.covs])
    z = rng.standard_normal((M, post.means.shape[1]))
    return post.means[comp] + np.einsum("nab,nb->na", roots[comp], z)

