"""Rank selection, scaled truncated SVD and nuisance-parameter estimates.

Conventions: ``X̄ = X / sqrt(N)`` is the rescaled ``N x p`` data matrix and
``gamma = p / N``. Left singular vectors are scaled so ``U^T U = N I`` and right
singular vectors so ``V^T V = p I``; the matching spectral scale ``D0`` is the
singular value divided by ``sqrt(gamma)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from ._linalg import sym_sqrt
from .errors import ArgError, DegeneracyWarning, RankError, SubcriticalError

DEFAULT_RANK_TOL = 0.02
DEFAULT_LOADING_FLOOR = 1e-8


def _singular_values(X):
    try:
        return sla.svdvals(X, check_finite=False)
    except np.linalg.LinAlgError:
        return sla.svd(X, compute_uv=False, lapack_driver="gesvd")


def estimate_rank(Xbar, tol=DEFAULT_RANK_TOL):
    """Number of singular values of ``Xbar`` above the bulk edge ``(1 + sqrt(gamma))(1 + tol)``."""
    Xbar = np.asarray(Xbar, dtype=float)
    N, p = Xbar.shape
    if N < 2 or p < 2:
        raise ArgError("need at least a 2 x 2 matrix")
    if tol < 0:
        raise ArgError("tolerance must be nonnegative")
    edge = (1.0 + np.sqrt(p / N)) * (1.0 + tol)
    return int(np.sum(_singular_values(Xbar) > edge))


@dataclass
class SpectralInit:
    U_pc: np.ndarray
    V_pc: np.ndarray
    D0: np.ndarray
    gamma: float
    warnings: list = field(default_factory=list)

    @property
    def rank(self):
        return self.D0.size


def truncated_svd(Xbar, r):
    """Scaled rank-``r`` SVD of ``Xbar`` with a deterministic sign convention."""
    Xbar = np.asarray(Xbar, dtype=float)
    N, p = Xbar.shape
    if not 1 <= r <= min(N, p):
        raise RankError(f"rank {r} is outside [1, {min(N, p)}]")
    try:
        U, s, Vt = sla.svd(Xbar, full_matrices=False, check_finite=False)
    except np.linalg.LinAlgError:
        U, s, Vt = sla.svd(Xbar, full_matrices=False, lapack_driver="gesvd")
    s_next = s[r] if r < s.size else 0.0
    U, s, V = U[:, :r], s[:r], Vt[:r].T
    # Largest-magnitude entry of each left vector is made positive.
    pivot = U[np.argmax(np.abs(U), axis=0), np.arange(r)]
    sign = np.where(pivot < 0, -1.0, 1.0)
    U = U * sign
    V = V * sign
    notes = []
    gaps = -np.diff(np.append(s, s_next))
    if np.any(gaps <= 1e-10 * max(s[0], np.finfo(float).tiny)):
        msg = "numerically repeated singular values; the spectral directions are not identifiable"
        warnings.warn(msg, DegeneracyWarning, stacklevel=2)
        notes.append(msg)
    # With the column scaling above, (1/N) U_pc diag(D0) V_pc^T reproduces the
    # truncation only if D0 = s / sqrt(gamma).
    gamma = p / N
    return SpectralInit(U * np.sqrt(N), V * np.sqrt(p), s / np.sqrt(gamma), gamma, notes)


def estimate_signal_strengths(D0, gamma):
    """Invert the spiked-model map from population to sample singular values."""
    D0 = np.atleast_1d(np.asarray(D0, dtype=float))
    if gamma <= 0:
        raise ArgError("gamma must be positive")
    x = gamma * D0**2 - (1.0 + gamma)
    disc = x**2 - 4.0 * gamma
    bad = np.flatnonzero((disc < 0) | (x < 0))
    if bad.size:
        raise SubcriticalError(int(bad[0]))
    D2 = (x + np.sqrt(disc)) / (2.0 * gamma)
    if np.any(D2 <= 0):
        raise SubcriticalError(int(np.flatnonzero(D2 <= 0)[0]))
    D = np.sqrt(D2)
    if D.size > 1 and np.any(np.diff(D) >= 0):
        warnings.warn("estimated signal strengths are not distinct", DegeneracyWarning, stacklevel=2)
    return D


def init_scale_params(D, gamma):
    """Spectral-initialisation scale parameters ``(S_L, Sigma_L, S_R, Sigma_R)``.

    All four are diagonal; ``Sigma`` holds the noise variances ``sigma^2`` and
    ``S`` the matching signal scales ``sqrt(1 - sigma^2)``.
    """
    D = np.atleast_1d(np.asarray(D, dtype=float))
    if np.any(D <= 0) or gamma <= 0:
        raise ArgError("signal strengths and gamma must be positive")
    D2 = D**2
    sig_L2 = (1.0 + D2) / (D2 * (gamma * D2 + 1.0))
    sig_R2 = (1.0 + gamma * D2) / (gamma * D2 * (D2 + 1.0))
    for k in range(D.size):
        if sig_L2[k] >= 1.0 or sig_R2[k] >= 1.0:
            raise SubcriticalError(k)
    return (
        np.diag(np.sqrt(1.0 - sig_L2)),
        np.diag(sig_L2),
        np.diag(np.sqrt(1.0 - sig_R2)),
        np.diag(sig_R2),
    )


def estimate_low_dim_loading(Xt, eps=DEFAULT_LOADING_FLOOR):
    """Symmetric root of ``(1/N) Xt^T Xt - I`` with eigenvalues floored at ``eps``."""
    Xt = np.asarray(Xt, dtype=float)
    if Xt.ndim == 1:
        Xt = Xt[:, None]
    N, r = Xt.shape
    if N <= r:
        raise ArgError("need more rows than columns")
    if eps <= 0:
        raise ArgError("eps must be positive")
    M = Xt.T @ Xt / N - np.eye(r)
    return sym_sqrt(M, floor=eps)


@dataclass
class HighNuisance:
    D_hat: np.ndarray  # (r,)
    S_L_pc: np.ndarray
    Sigma_L_pc: np.ndarray
    S_R_pc: np.ndarray
    Sigma_R_pc: np.ndarray


@dataclass
class NuisanceEstimates:
    high: dict  # modality id -> HighNuisance
    low: dict  # modality id -> L_hat


def estimate_nuisance(spectral, low_blocks, eps=DEFAULT_LOADING_FLOOR):
    """Nuisance estimates for every modality.

    ``spectral`` maps high-dim modality ids to ``SpectralInit``; ``low_blocks``
    maps low-dim ids to their ``N x r̃`` data.
    """
    high = {}
    for h, sp in spectral.items():
        try:
            D = estimate_signal_strengths(sp.D0, sp.gamma)
            S_L, Sig_L, S_R, Sig_R = init_scale_params(D, sp.gamma)
        except SubcriticalError as exc:
            raise SubcriticalError(exc.component, modality=h) from None
        high[h] = HighNuisance(D, S_L, Sig_L, S_R, Sig_R)
    low = {l: estimate_low_dim_loading(X, eps) for l, X in low_blocks.items()}
    return NuisanceEstimates(high, low)
