"""Orchestrated AMP: spectral start, prior fits and the phased iteration.

One iteration ``t`` runs four phases:

(a) denoise every ``V_t,h`` with its loading prior, form ``U_t,h`` with the
    Onsager correction and update ``Sigma^L_t,h``, ``S^L_t,h``;
(b) denoise the stacked ``(U_t,1..m, X̃_1..m̃)`` rows with the joint prior;
(c) form ``V_{t+1},h`` and update ``Sigma^R_{t+1},h``, ``S^R_{t+1},h``;
(d) read the low-dimensional embeddings off the same joint posterior mean.

All ``U`` updates use the complete set of current-iteration intermediates
(Jacobi-style), so the result does not depend on modality order.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import denoise as _dn
from ._linalg import block_diag, ensure_pd, sym_sqrt
from .dataset_io import HighModel, LowModel, ModelBundle, load_dataset
from .errors import ArgError, DivergenceError, RankError
from .priors import (
    LinearGaussianChannel,
    build_npmle_support,
    default_components,
    fit_gmm_deconvolution,
    fit_npmle_weights,
    prune,
)
from .rng import substream
from .spectral import (
    DEFAULT_RANK_TOL,
    estimate_nuisance,
    estimate_rank,
    truncated_svd,
)


@dataclass
class AmpState:
    t: int
    U: dict
    V: dict
    Ubar: dict
    Vbar: dict
    Ubar_prev: dict
    Ut: dict


@dataclass
class StateEvolutionRecord:
    """Per-modality lists indexed by iteration.

    ``S_L[h][t]``/``Sigma_L[h][t]`` exist for ``t = 0..T``; ``S_R[h][t]`` and
    ``Sigma_R[h][t]`` for ``t = 0..T+1`` (entry 0 is the spectral value).
    """

    S_L: dict = field(default_factory=dict)
    Sigma_L: dict = field(default_factory=dict)
    S_R: dict = field(default_factory=dict)
    Sigma_R: dict = field(default_factory=dict)

    def rows(self):
        """Long-format rows ``(t, modality, matrix, i, j, value)``."""
        out = []
        for name in ("S_L", "Sigma_L", "S_R", "Sigma_R"):
            for h, seq in getattr(self, name).items():
                for t, M in enumerate(seq):
                    for (i, j), v in np.ndenumerate(M):
                        out.append((t, h, name, i, j, float(v)))
        out.sort(key=lambda r: (r[0], r[1], r[2], r[3], r[4]))
        return out


@dataclass
class FittedPriors:
    mu: object
    nu: dict


@dataclass
class RunResult:
    Ubar: dict
    Ut: dict
    Vbar: dict
    record: StateEvolutionRecord
    bundle: ModelBundle
    state: AmpState
    spectral: dict
    nuisance: object
    priors: FittedPriors
    history: list = field(default_factory=list)  # per-t copies of (Ubar, Ut) when requested


def _layout(dataset, ranks):
    """Slices of each modality in the joint latent vector, high first then low."""
    out, start = OrderedDict(), 0
    for h in dataset.high:
        out[h] = np.arange(start, start + ranks[h])
        start += ranks[h]
    for l, X in dataset.low.items():
        out[l] = np.arange(start, start + X.shape[1])
        start += X.shape[1]
    return out


def _check_finite(t, h, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergenceError(t, h)


# Module-level indirections for the two denoiser calls; tests replace them to
# stub the Onsager Jacobians.
def _denoise_right(channel, prior, V):
    return _dn.rowwise_denoise(channel, prior, V, np.arange(channel.latent_dim))


def _denoise_joint(channel, prior, Y, blocks):
    return _dn.rowwise_denoise_blocks(channel, prior, Y, blocks)


def initialize(dataset, nuisance, spectral):
    """Starting state and record: ``V_0 = V_pc``, ``Ubar_{-1} = U_pc (Sigma^R_pc)^{1/2}``."""
    U, V, Ubar, Vbar, Ubar_prev = {}, {}, {}, {}, {}
    record = StateEvolutionRecord()
    for h, Xbar in dataset.high.items():
        sp = spectral[h]
        nu = nuisance.high[h]
        N, p = Xbar.shape
        if sp.U_pc.shape[0] != N or sp.V_pc.shape[0] != p or nu.D_hat.size != sp.rank:
            raise ArgError(f"modality {h}: spectral start does not match the data")
        V[h] = sp.V_pc
        Ubar_prev[h] = sp.U_pc @ sym_sqrt(nu.Sigma_R_pc)
        record.S_R[h] = [nu.S_R_pc.copy()]
        record.Sigma_R[h] = [nu.Sigma_R_pc.copy()]
        record.S_L[h] = []
        record.Sigma_L[h] = []
    return AmpState(0, U, V, Ubar, Vbar, Ubar_prev, {}), record


def joint_channel(dataset, S_L, Sigma_L, L_hat):
    A = block_diag(*([S_L[h] for h in dataset.high] + [L_hat[l] for l in dataset.low]))
    B = block_diag(*([ensure_pd(Sigma_L[h]) for h in dataset.high]
                     + [np.eye(L_hat[l].shape[0]) for l in dataset.low]))
    return LinearGaussianChannel(A, B)


def iterate_once(state, record, dataset, mu, nu, D_hat, L_hat):
    """One full OrchAMP iteration; returns the new state (record is updated in place)."""
    t = state.t
    N = dataset.N
    layout = _layout(dataset, {h: D_hat[h].size for h in dataset.high})
    U, Vbar, S_L, Sigma_L = {}, {}, {}, {}
    # (a) right denoisers, U update, left state evolution
    for h, Xbar in dataset.high.items():
        gamma = dataset.gamma(h)
        ch = LinearGaussianChannel(record.S_R[h][t], ensure_pd(record.Sigma_R[h][t]))
        Vbar[h], J_R = _denoise_right(ch, nu[h], state.V[h])
        U[h] = Xbar @ Vbar[h] - gamma * state.Ubar_prev[h] @ J_R.T
        _check_finite(t, h, Vbar[h], U[h])
        Sigma_L[h] = Vbar[h].T @ Vbar[h] / N
        S_L[h] = Sigma_L[h] @ np.diag(D_hat[h])
        record.Sigma_L[h].append(Sigma_L[h])
        record.S_L[h].append(S_L[h])
    # (b) joint denoiser over all modalities
    ch = joint_channel(dataset, S_L, Sigma_L, L_hat)
    Y = np.hstack([U[h] for h in dataset.high] + [dataset.low[l] for l in dataset.low])
    blocks = [(layout[h], layout[h]) for h in dataset.high]
    means, J_L = _denoise_joint(ch, mu, Y, blocks)
    Ubar = {h: means[:, layout[h]] for h in dataset.high}
    # (c) V update, right state evolution
    V = {}
    for k, (h, Xbar) in enumerate(dataset.high.items()):
        V[h] = Xbar.T @ Ubar[h] - Vbar[h] @ J_L[k].T
        _check_finite(t, h, Ubar[h], V[h])
        Sig_R = Ubar[h].T @ Ubar[h] / N
        record.Sigma_R[h].append(Sig_R)
        record.S_R[h].append(Sig_R @ np.diag(D_hat[h]))
    # (d) low-dimensional embeddings
    Ut = {l: means[:, layout[l]] for l in dataset.low}
    for l, M in Ut.items():
        _check_finite(t, l, M)
    return AmpState(t + 1, U, V, Ubar, Vbar, Ubar, Ut)


def fit_priors(dataset, spectral, nuisance, *, gmm_components="auto", prior_class="gmm", seed=0):
    """Empirical-Bayes fits of the joint prior and the per-modality loading priors."""
    N = dataset.N
    K_mu, K_nu = gmm_components, gmm_components
    if isinstance(gmm_components, dict):
        K_mu = gmm_components.get("mu", "auto")
        K_nu = gmm_components.get("nu", "auto")
    scales = [nuisance.high[h].S_L_pc for h in dataset.high] + [nuisance.low[l] for l in dataset.low]
    noises = [nuisance.high[h].Sigma_L_pc for h in dataset.high] + \
             [np.eye(X.shape[1]) for X in dataset.low.values()]
    obs = [spectral[h].U_pc for h in dataset.high] + list(dataset.low.values())
    ch_mu = LinearGaussianChannel(block_diag(*scales), block_diag(*noises))
    Y_mu = np.hstack(obs)
    if prior_class == "npmle":
        atoms = build_npmle_support(scales, obs)
        mu = prune(fit_npmle_weights(Y_mu, ch_mu, atoms))
    else:
        K = default_components(N) if K_mu == "auto" else int(K_mu)
        mu = fit_gmm_deconvolution(Y_mu, ch_mu, K, seed=substream(seed, "gmm-init-mu"))
    nu = {}
    for idx, h in enumerate(dataset.high):
        sp, est = spectral[h], nuisance.high[h]
        ch = LinearGaussianChannel(est.S_R_pc, est.Sigma_R_pc)
        if prior_class == "npmle":
            atoms = build_npmle_support([est.S_R_pc], [sp.V_pc])
            nu[h] = prune(fit_npmle_weights(sp.V_pc, ch, atoms))
        else:
            p = sp.V_pc.shape[0]
            K = default_components(p) if K_nu == "auto" else int(K_nu)
            nu[h] = fit_gmm_deconvolution(sp.V_pc, ch, K, seed=substream(seed, "gmm-init-nu", idx))
    return FittedPriors(mu, nu)


def resolve_ranks(dataset, ranks=None, rank_tol=DEFAULT_RANK_TOL):
    out = OrderedDict()
    ranks = ranks or {}
    for h, Xbar in dataset.high.items():
        r = ranks.get(h, "auto")
        if r == "auto" or r is None:
            r = estimate_rank(Xbar, rank_tol)
            if r == 0:
                raise RankError(f"modality {h!r}: no spike above the noise bulk edge")
        out[h] = int(r)
    return out


def run(dataset, *, iterations, ranks=None, gmm_components="auto", prior_class="gmm", seed=0,
        rank_tol=DEFAULT_RANK_TOL, priors=None, keep_history=False, preprocessing=None):
    """Full pipeline on a prepared dataset: spectral start, prior fits, ``T + 1`` iterations.

    The loop runs for ``t = 0..T``; ``T = 0`` therefore returns the denoised
    spectral embeddings. ``priors`` may supply already-fitted priors.
    """
    if iterations < 0:
        raise ArgError("iterations must be nonnegative")
    r = resolve_ranks(dataset, ranks, rank_tol)
    spectral = OrderedDict((h, truncated_svd(X, r[h])) for h, X in dataset.high.items())
    nuisance = estimate_nuisance(spectral, dataset.low)
    if priors is None:
        priors = fit_priors(dataset, spectral, nuisance, gmm_components=gmm_components,
                            prior_class=prior_class, seed=seed)
    D_hat = {h: nuisance.high[h].D_hat for h in dataset.high}
    state, record = initialize(dataset, nuisance, spectral)
    history = []
    for _ in range(iterations + 1):
        state = iterate_once(state, record, dataset, priors.mu, priors.nu, D_hat, nuisance.low)
        if keep_history:
            history.append(({h: M.copy() for h, M in state.Ubar.items()},
                            {l: M.copy() for l, M in state.Ut.items()}))
    T = iterations
    bundle = ModelBundle(
        N=dataset.N,
        iterations=T,
        high=OrderedDict(
            (h, HighModel(rank=r[h], p=dataset.high[h].shape[1], gamma=dataset.gamma(h),
                          D_hat=D_hat[h].copy(), Vbar=state.Vbar[h].copy(),
                          Sigma_L=record.Sigma_L[h][T].copy(), S_L=record.S_L[h][T].copy(),
                          nu=priors.nu[h]))
            for h in dataset.high),
        low=OrderedDict((l, LowModel(rank=X.shape[1], L_hat=nuisance.low[l].copy()))
                        for l, X in dataset.low.items()),
        mu=priors.mu,
        preprocessing=dict(preprocessing or {}),
    )
    return RunResult(state.Ubar, state.Ut, state.Vbar, record, bundle, state, spectral,
                     nuisance, priors, history)


def run_config(cfg):
    """Load the data named by ``cfg`` and run the pipeline."""
    dataset, record = load_dataset(cfg)
    ranks = {m.id: m.rank for m in cfg.modalities if m.kind == "high"}
    return run(dataset, iterations=cfg.iterations, ranks=ranks,
               gmm_components=cfg.gmm_components, prior_class=cfg.prior_class,
               seed=cfg.seed, rank_tol=cfg.rank_tol, preprocessing=record)
