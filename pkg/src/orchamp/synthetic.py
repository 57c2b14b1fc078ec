"""Synthetic data, oracle state evolution and evaluation helpers.

The generator draws subject effects from a joint prior ``mu`` and loadings
from per-modality priors ``nu_h``, then forms

    X_h = (1/sqrt(N)) U_h D_h V_h^T + W_h,      X̃_l = Ũ_l L_l^T + W̃_l.

Priors are normalized blockwise (mean zero, identity second moment per
modality block) so cross-modality correlation survives normalization.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ._linalg import block_diag, sym_inv_sqrt, sym_sqrt
from .dataset_io import MultimodalDataset
from .denoise import denoise_rows
from .errors import ArgError, SchemaError
from .predict import ObservedBlock, Query
from .priors import (
    GaussianMixturePrior,
    LinearGaussianChannel,
    affine_transform,
    prior_from_dict,
    sample_prior,
)
from .rng import substream
from .spectral import init_scale_params


@dataclass
class GroundTruth:
    U: dict
    Ut: dict
    V: dict
    D: dict
    L: dict
    mu: object
    nu: dict
    noise: dict = field(default=None, repr=False)

    @property
    def N(self):
        return next(iter(self.U.values())).shape[0]

    def layout(self):
        out, start = OrderedDict(), 0
        for h, d in self.D.items():
            out[h] = slice(start, start + d.size)
            start += d.size
        for l, L in self.L.items():
            out[l] = slice(start, start + L.shape[0])
            start += L.shape[0]
        return out

    def latents(self):
        """Joint ``N x (r + r̃)`` latent matrix in layout order."""
        return np.hstack([self.U[h] for h in self.D] + [self.Ut[l] for l in self.L])


def normalize_prior(prior, sizes=None):
    """Blockwise affine map to mean zero and identity second moment.

    ``sizes`` lists the block widths (default: one block). Within each block
    the map is ``C_bb^{-1/2}(u_b - m_b)`` using the prior's analytic moments.
    """
    sizes = [prior.dim] if sizes is None else list(sizes)
    if sum(sizes) != prior.dim:
        raise ArgError(f"block sizes {sizes} do not add up to prior dim {prior.dim}")
    mean = prior.mean()
    cov = prior.covariance()
    T, start = [], 0
    for s in sizes:
        blk = cov[start:start + s, start:start + s]
        if np.linalg.eigvalsh(blk)[0] <= 0:
            raise ArgError("prior block has a singular covariance; cannot normalize")
        T.append(sym_inv_sqrt(blk))
        start += s
    T = block_diag(*T)
    return affine_transform(prior, T, -T @ mean)


def _check_strengths(D, gamma, h):
    D = np.atleast_1d(np.asarray(D, dtype=float))
    if np.any(D <= gamma ** -0.25):
        raise ArgError(f"modality {h}: signal strengths must exceed gamma^(-1/4) = {gamma ** -0.25:.4f}")
    if D.size > 1 and np.any(np.diff(D) >= 0):
        raise ArgError(f"modality {h}: signal strengths must be distinct and decreasing")
    return D


def generate_dataset(mu, nu, D, L, N, p, seed=0, noise_scale=1.0, normalize=True, keep_noise=False):
    """Draw a multimodal dataset and its ground truth.

    Parameters
    ----------
    mu : joint prior over ``(U_1..U_m, Ũ_1..Ũ_m̃)`` in that order.
    nu : dict modality -> loading prior.
    D : dict modality -> signal strengths (length ``r_h``).
    L : dict low-dim modality -> symmetric full-rank loading matrix.
    N : number of subjects.
    p : dict modality -> number of features.
    """
    D = OrderedDict((h, np.atleast_1d(np.asarray(d, dtype=float))) for h, d in D.items())
    L = OrderedDict((l, np.atleast_2d(np.asarray(M, dtype=float))) for l, M in L.items())
    for h in D:
        _check_strengths(D[h], p[h] / N, h)
    for l, M in L.items():
        if M.shape[0] != M.shape[1] or np.linalg.matrix_rank(M) < M.shape[0]:
            raise ArgError(f"modality {l}: loading must be square and full rank")
    sizes = [d.size for d in D.values()] + [M.shape[0] for M in L.values()]
    if mu.dim != sum(sizes):
        raise ArgError(f"joint prior has dim {mu.dim}, layout needs {sum(sizes)}")
    if normalize:
        mu = normalize_prior(mu, sizes)
        nu = OrderedDict((h, normalize_prior(nu[h])) for h in D)
    lat = sample_prior(mu, N, substream(seed, "synthetic-latent"))
    truth = GroundTruth({}, {}, {}, D, L, mu, OrderedDict((h, nu[h]) for h in D))
    noise = {}
    high, low = OrderedDict(), OrderedDict()
    start = 0
    for idx, (h, d) in enumerate(D.items()):
        U = lat[:, start:start + d.size]
        start += d.size
        if nu[h].dim != d.size:
            raise ArgError(f"modality {h}: loading prior dim {nu[h].dim} != rank {d.size}")
        V = sample_prior(nu[h], p[h], substream(seed, "synthetic-loading", idx))
        W = substream(seed, "synthetic-noise", idx).standard_normal((N, p[h]))
        high[h] = (U * d) @ V.T / np.sqrt(N) + noise_scale * W
        truth.U[h], truth.V[h] = U, V
        noise[h] = W
    for idx, (l, M) in enumerate(L.items()):
        Ut = lat[:, start:start + M.shape[0]]
        start += M.shape[0]
        W = substream(seed, "synthetic-noise-low", idx).standard_normal((N, M.shape[0]))
        low[l] = Ut @ M.T + noise_scale * W
        truth.Ut[l] = Ut
        noise[l] = W
    if keep_noise:
        truth.noise = noise
    return MultimodalDataset.from_raw(high, low), truth


def generate_query(truth, observed, seed=0, noise_scale=1.0):
    """Fresh subject from ``truth.mu`` observed on the given feature sets.

    ``observed`` is ``{"high": {h: features}, "low": {l: features}}``.
    Returns the query and the true joint latent vector.
    """
    rng = substream(seed, "synthetic-query")
    u = sample_prior(truth.mu, 1, rng)[0]
    lay = truth.layout()
    high, low = [], []
    for h, feats in observed.get("high", {}).items():
        feats = np.asarray(feats, dtype=np.int64)
        signal = (truth.V[h][feats] * truth.D[h]) @ u[lay[h]] / np.sqrt(truth.N)
        high.append(ObservedBlock(h, feats, signal + noise_scale * rng.standard_normal(feats.size)))
    for l, feats in observed.get("low", {}).items():
        feats = np.asarray(feats, dtype=np.int64)
        signal = truth.L[l][feats] @ u[lay[l]]
        low.append(ObservedBlock(l, feats, signal + noise_scale * rng.standard_normal(feats.size)))
    return Query(high, low), u


# ---------------------------------------------------------------------------
# Oracle state evolution


@dataclass
class OracleSE:
    S_L: dict
    Sigma_L: dict
    S_R: dict
    Sigma_R: dict
    Sigma_tilde: dict
    Gamma_L: dict
    Gamma_R: dict
    gamma: dict
    T: int

    def rows(self):
        """Long-format rows ``(t, modality, matrix, i, j, value)``."""
        out = []
        for name in ("S_L", "Sigma_L", "S_R", "Sigma_R", "Gamma_L", "Gamma_R", "Sigma_tilde"):
            for k, seq in getattr(self, name).items():
                for t, M in enumerate(seq):
                    for (i, j), v in np.ndenumerate(M):
                        out.append((t, k, name, i, j, float(v)))
        out.sort(key=lambda r: (r[0], r[1], r[2], r[3], r[4]))
        return out


def _gamma_matrix(S, Sigma, D, scale=1.0):
    Dm = np.diag(D ** -0.5)
    return Dm @ S.T @ np.linalg.solve(Sigma, S) @ Dm / scale


def oracle_state_evolution(mu, nu, D, L, gamma, T, mc=100_000, seed=0):
    """Monte Carlo state evolution under the true priors and signal strengths.

    Random draws are shared across iterations (common random numbers).
    """
    if mc < 100_000:
        raise ArgError("oracle state evolution needs mc >= 1e5")
    D = OrderedDict((h, np.atleast_1d(np.asarray(d, dtype=float))) for h, d in D.items())
    L = OrderedDict((l, np.atleast_2d(np.asarray(M, dtype=float))) for l, M in L.items())
    hs, ls = list(D), list(L)
    sizes = [D[h].size for h in hs] + [L[l].shape[0] for l in ls]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    lay = {k: slice(offs[i], offs[i + 1]) for i, k in enumerate(hs + ls)}
    lat = sample_prior(mu, mc, substream(seed, "oracle-latent"))
    z_left = substream(seed, "oracle-left-noise").standard_normal((mc, sum(sizes)))
    Vs, z_right = {}, {}
    for idx, h in enumerate(hs):
        Vs[h] = sample_prior(nu[h], mc, substream(seed, "oracle-loading", idx))
        z_right[h] = substream(seed, "oracle-right-noise", idx).standard_normal((mc, D[h].size))
    # Low-dim observations do not change with t.
    Y_low = [lat[:, lay[l]] @ L[l].T + z_left[:, lay[l]] for l in ls]

    out = OracleSE({h: [] for h in hs}, {h: [] for h in hs}, {}, {}, {l: [] for l in ls},
                   {h: [] for h in hs}, {h: [] for h in hs}, dict(gamma), T)
    for h in hs:
        _, _, S_Rpc, Sig_Rpc = init_scale_params(D[h], gamma[h])
        out.S_R[h] = [S_Rpc]
        out.Sigma_R[h] = [Sig_Rpc]
        out.Gamma_R[h] = [_gamma_matrix(S_Rpc, Sig_Rpc, D[h])]
    for t in range(T + 1):
        for h in hs:
            S, Sig = out.S_R[h][t], out.Sigma_R[h][t]
            Y = Vs[h] @ S.T + z_right[h] @ sym_sqrt(Sig).T
            v = denoise_rows(LinearGaussianChannel(S, Sig), nu[h], Y)
            Sig_L = gamma[h] * (v.T @ v) / mc
            S_L = gamma[h] * (v.T @ Vs[h]) / mc @ np.diag(D[h])
            out.Sigma_L[h].append(0.5 * (Sig_L + Sig_L.T))
            out.S_L[h].append(S_L)
            out.Gamma_L[h].append(_gamma_matrix(S_L, out.Sigma_L[h][t], D[h], gamma[h]))
        A = block_diag(*([out.S_L[h][t] for h in hs] + [L[l] for l in ls]))
        B = block_diag(*([out.Sigma_L[h][t] for h in hs] + [np.eye(L[l].shape[0]) for l in ls]))
        Y = np.hstack([lat[:, lay[h]] @ out.S_L[h][t].T + z_left[:, lay[h]] @ sym_sqrt(out.Sigma_L[h][t]).T
                       for h in hs] + Y_low)
        u = denoise_rows(LinearGaussianChannel(A, B), mu, Y)
        for h in hs:
            uh = u[:, lay[h]]
            Sig_R = uh.T @ uh / mc
            Sig_R = 0.5 * (Sig_R + Sig_R.T)
            S_R = (uh.T @ lat[:, lay[h]]) / mc @ np.diag(D[h])
            out.Sigma_R[h].append(Sig_R)
            out.S_R[h].append(S_R)
            out.Gamma_R[h].append(_gamma_matrix(S_R, Sig_R, D[h]))
        for l in ls:
            ul = u[:, lay[l]]
            out.Sigma_tilde[l].append(0.5 * (ul.T @ ul + (ul.T @ ul).T) / mc)
    return out


def mse_oracles(oracle, t):
    """Limiting errors at iteration ``t`` for ``Ubar`` (``"U"``), ``Vbar`` (``"V"``) and ``Ũ`` (``"Ut"``)."""
    if t > oracle.T:
        raise ArgError(f"oracle only covers t <= {oracle.T}")
    U = {h: float(np.trace(np.eye(S[t + 1].shape[0]) - S[t + 1] @ S[t + 1]))
         for h, S in oracle.Sigma_R.items()}
    V = {h: float(np.trace(np.eye(S[t].shape[0]) - S[t] @ S[t] / oracle.gamma[h] ** 2))
         for h, S in oracle.Sigma_L.items()}
    Ut = {l: float(np.trace(np.eye(S[t].shape[0]) - S[t] @ S[t])) for l, S in oracle.Sigma_tilde.items()}
    return {"U": U, "V": V, "Ut": Ut}


def mse_from_sigma(Sigma):
    """``Tr(I - Sigma^2)`` for a single second-moment matrix."""
    Sigma = np.atleast_2d(Sigma)
    return float(np.trace(np.eye(Sigma.shape[0]) - Sigma @ Sigma))


def empirical_mse(estimate, truth):
    """``(1/N^2) ||E E^T - T T^T||_F^2`` without forming ``N x N`` matrices."""
    E = np.asarray(estimate, dtype=float)
    Tm = np.asarray(truth, dtype=float)
    if E.ndim == 1:
        E, Tm = E[:, None], Tm[:, None]
    if E.shape != Tm.shape:
        raise ArgError("estimate and truth shapes differ")
    N = E.shape[0]
    EE, TT, ET = E.T @ E, Tm.T @ Tm, E.T @ Tm
    return float((np.sum(EE * EE) + np.sum(TT * TT) - 2.0 * np.sum(ET * ET)) / N**2)


def align_signs(estimate, truth):
    """Per-column sign making ``estimate_j . truth_j >= 0``."""
    E = np.asarray(estimate, dtype=float)
    Tm = np.asarray(truth, dtype=float)
    if E.shape != Tm.shape:
        raise ArgError("estimate and truth shapes differ")
    if E.ndim == 1:
        return np.array([1.0 if E @ Tm >= 0 else -1.0])
    return np.where(np.einsum("ij,ij->j", E, Tm) >= 0, 1.0, -1.0)


# ---------------------------------------------------------------------------
# Scenarios


def default_scenario():
    """Two high-dim modalities plus one low-dim modality with a correlated 3-component latent mixture."""
    C = 0.3 * np.array([[1.0, 0.5, 0.3], [0.5, 1.0, 0.4], [0.3, 0.4, 1.0]])
    mu = {"kind": "gmm", "weights": [0.3, 0.4, 0.3],
          "means": [[-1.5, -1.2, -1.0], [0.0, 0.3, 0.2], [1.5, 0.9, 1.0]],
          "covariances": [C.tolist()] * 3}
    nu = {"kind": "gmm", "weights": [0.5, 0.5], "means": [[-1.0], [1.0]],
          "covariances": [[[0.25]], [[0.25]]]}
    return {
        "N": 4000,
        "seed": 20240601,
        "iterations": 5,
        "oracle_mc": 1_000_000,
        "mu": mu,
        "high": [{"id": "h1", "p": 2000, "D": [1.8], "nu": nu},
                 {"id": "h2", "p": 1000, "D": [2.2], "nu": nu}],
        "low": [{"id": "l1", "L": [[1.0]]}],
        "coverage": {"queries": 1000, "observe": {"h1": 0.5}, "alpha": 0.1, "mc_samples": 100_000},
    }


@dataclass
class Scenario:
    N: int
    seed: int
    iterations: int
    oracle_mc: int
    mu: object
    nu: dict
    D: dict
    L: dict
    p: dict
    coverage: dict

    @property
    def gamma(self):
        return {h: self.p[h] / self.N for h in self.p}


def parse_scenario(doc):
    try:
        return Scenario(
            N=int(doc["N"]), seed=int(doc.get("seed", 0)), iterations=int(doc.get("iterations", 5)),
            oracle_mc=int(doc.get("oracle_mc", 100_000)),
            mu=prior_from_dict(doc["mu"]),
            nu=OrderedDict((e["id"], prior_from_dict(e["nu"])) for e in doc["high"]),
            D=OrderedDict((e["id"], np.asarray(e["D"], dtype=float)) for e in doc["high"]),
            L=OrderedDict((e["id"], np.asarray(e["L"], dtype=float)) for e in doc.get("low", [])),
            p=OrderedDict((e["id"], int(e["p"])) for e in doc["high"]),
            coverage=dict(doc.get("coverage", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed scenario: {exc}") from exc


def scenario_data(sc, noise_scale=1.0):
    return generate_dataset(sc.mu, sc.nu, sc.D, sc.L, sc.N, sc.p, seed=sc.seed, noise_scale=noise_scale)


def oracle_for(sc, truth, T=None, mc=None):
    return oracle_state_evolution(truth.mu, truth.nu, sc.D, sc.L, sc.gamma,
                                  sc.iterations if T is None else T,
                                  sc.oracle_mc if mc is None else mc, seed=sc.seed)


def se_report(result, oracle, truth):
    """Rows comparing empirical and oracle state evolution and MSE per ``t`` and modality."""
    rows = []
    T = min(len(next(iter(result.record.Sigma_L.values()))) - 1, oracle.T)
    for t in range(T + 1):
        lim = mse_oracles(oracle, t)
        Ubar, Ut = result.history[t] if result.history else (None, None)
        for h in truth.D:
            emp = result.record.Sigma_L[h][t]
            orc = oracle.Sigma_L[h][t]
            row = {"t": t, "modality": h,
                   "sigma_L_empirical": float(emp[0, 0]) if emp.size == 1 else emp.tolist(),
                   "sigma_L_oracle": float(orc[0, 0]) if orc.size == 1 else orc.tolist(),
                   "sigma_L_maxdiff": float(np.max(np.abs(emp - orc))),
                   "mse_oracle": lim["U"][h]}
            row["mse_empirical"] = empirical_mse(Ubar[h], truth.U[h]) if Ubar is not None else float("nan")
            rows.append(row)
        for l in truth.L:
            row = {"t": t, "modality": l, "sigma_L_empirical": float("nan"), "sigma_L_oracle": float("nan"),
                   "sigma_L_maxdiff": float("nan"), "mse_oracle": lim["Ut"][l]}
            row["mse_empirical"] = empirical_mse(Ut[l], truth.Ut[l]) if Ut is not None else float("nan")
            rows.append(row)
    return rows


def coverage_experiment(bundle, truth, observe, n_queries, alpha, M, seed):
    """Fraction of fresh subjects whose true latent lies inside its prediction set.

    ``observe`` maps high-dim modality ids to the observed feature fraction.
    True latents are sign-aligned to the fitted frame through ``Vbar`` before
    the containment check.
    """
    from .predict import predict_set

    lay = truth.layout()
    flip = np.ones(bundle.latent_dim)
    for h in truth.D:
        flip[lay[h]] = align_signs(bundle.high[h].Vbar, truth.V[h])
    rng = substream(seed, "coverage-features")
    hits, radii = [], []
    for q in range(n_queries):
        observed = {"high": {}}
        for h, frac in observe.items():
            p = truth.V[h].shape[0]
            k = max(1, int(round(frac * p)))
            observed["high"][h] = np.sort(rng.choice(p, size=k, replace=False))
        query, u = generate_query(truth, observed, seed=substream(seed, "coverage-query", q))
        ps = predict_set(bundle, query, alpha, M, seed=seed, query_id=q)
        hits.append(ps.contains(flip * u))
        radii.append(ps.radius)
    return float(np.mean(hits)), np.asarray(radii), np.asarray(hits)
