"""Point prediction and prediction balls for partially observed query subjects.

For each observed high-dimensional block the features are first regressed on
the fitted loadings (least squares), giving a noisy observation of that
modality's latent block. Observed low-dimensional features enter directly
through their loading rows. The joint prior then turns the stacked
observations into a posterior; the prediction set is the Euclidean ball around
the posterior mean holding ``1 - alpha`` of the posterior mass.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._linalg import block_diag, symmetrize
from .denoise import denoise_mean, posterior_sample
from .errors import ArgError, ParseError, RankError, SchemaError
from .priors import LinearGaussianChannel
from .rng import substream

DEFAULT_MC_SAMPLES = 100_000


@dataclass
class ObservedBlock:
    modality: str
    features: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.int64).reshape(-1)
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.features.size == 0:
            raise ArgError(f"modality {self.modality}: empty feature set")
        if self.features.size != self.values.size:
            raise ArgError(f"modality {self.modality}: {self.features.size} features but {self.values.size} values")
        if np.any(np.diff(self.features) <= 0):
            raise ArgError(f"modality {self.modality}: features must be strictly increasing")
        if self.features[0] < 0:
            raise ArgError(f"modality {self.modality}: negative feature index")
        if not np.all(np.isfinite(self.values)):
            raise ArgError(f"modality {self.modality}: non-finite value")


@dataclass
class Query:
    high: list = field(default_factory=list)
    low: list = field(default_factory=list)

    def __post_init__(self):
        if not self.high and not self.low:
            raise ArgError("a query must observe at least one block")
        ids = [b.modality for b in self.high] + [b.modality for b in self.low]
        if len(set(ids)) != len(ids):
            raise ArgError("each modality may appear at most once in a query")

    @classmethod
    def from_dict(cls, doc):
        try:
            high = [ObservedBlock(b["modality"], b["features"], b["values"]) for b in doc.get("high", [])]
            low = [ObservedBlock(b["modality"], b["features"], b["values"]) for b in doc.get("low", [])]
        except (KeyError, TypeError, AttributeError) as exc:
            raise SchemaError(f"malformed query: {exc}") from exc
        except ArgError as exc:
            raise SchemaError(str(exc)) from exc
        try:
            return cls(high, low)
        except ArgError as exc:
            raise SchemaError(str(exc)) from exc

    def to_dict(self):
        def enc(b):
            return {"modality": b.modality, "features": b.features.tolist(), "values": b.values.tolist()}
        return {"high": [enc(b) for b in self.high], "low": [enc(b) for b in self.low]}


def load_query(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise SchemaError("query must be a JSON object")
    return Query.from_dict(doc)


def _check_against(bundle, query):
    for b in query.high:
        if b.modality not in bundle.high:
            raise ArgError(f"unknown high-dimensional modality {b.modality!r}")
        if b.features[-1] >= bundle.high[b.modality].p:
            raise ArgError(f"modality {b.modality}: feature index out of range")
    for b in query.low:
        if b.modality not in bundle.low:
            raise ArgError(f"unknown low-dimensional modality {b.modality!r}")
        if b.features[-1] >= bundle.low[b.modality].rank:
            raise ArgError(f"modality {b.modality}: feature index out of range")


def least_squares_point(bundle, modality, features, Q):
    """Regress the observed features on ``(1/N) Vbar_F D_hat`` after scaling by ``1/sqrt(N)``."""
    m = bundle.high[modality]
    features = np.asarray(features, dtype=np.int64)
    R = m.Vbar[features] * m.D_hat / bundle.N
    return _least_squares(R, np.asarray(Q, dtype=float) / np.sqrt(bundle.N))


def _least_squares(R, q):
    if R.shape[0] < R.shape[1] or np.linalg.matrix_rank(R) < R.shape[1]:
        raise RankError("design is rank deficient; too few observed features")
    G = R.T @ R
    return np.linalg.solve(G, R.T @ q)


@dataclass
class QueryChannel:
    channel: LinearGaussianChannel
    lambdas: dict  # high-dim modality -> observed fraction
    noise: dict  # modality -> noise covariance block


def assemble_query_channel(bundle, query):
    """Joint channel from the full latent vector to the stacked observed blocks."""
    _check_against(bundle, query)
    coords = bundle.coords()
    d = bundle.latent_dim
    rows, noises, lambdas, noise = [], [], {}, {}
    for b in query.high:
        m = bundle.high[b.modality]
        lam = b.features.size / m.p
        Dinv = np.diag(1.0 / m.D_hat)
        B = symmetrize(Dinv @ np.linalg.inv(m.Sigma_L) @ Dinv) / lam
        A = np.zeros((m.rank, d))
        A[:, coords[b.modality]] = np.eye(m.rank)
        rows.append(A)
        noises.append(B)
        lambdas[b.modality] = lam
        noise[b.modality] = B
    for b in query.low:
        m = bundle.low[b.modality]
        A = np.zeros((b.features.size, d))
        A[:, coords[b.modality]] = m.L_hat[b.features]
        rows.append(A)
        noises.append(np.eye(b.features.size))
        noise[b.modality] = noises[-1]
    channel = LinearGaussianChannel(np.vstack(rows), block_diag(*noises))
    return QueryChannel(channel, lambdas, noise)


def observation_vector(bundle, query):
    """Stacked observations: least-squares points for high blocks, raw values for low blocks."""
    parts = [least_squares_point(bundle, b.modality, b.features, b.values) for b in query.high]
    parts += [b.values for b in query.low]
    return np.concatenate(parts)


def predict_center(bundle, query, qc=None):
    qc = assemble_query_channel(bundle, query) if qc is None else qc
    return denoise_mean(qc.channel, bundle.mu, observation_vector(bundle, query))


def _order_index(alpha, M):
    # Conservative empirical quantile: the ceil((1 - alpha)(M + 1))-th order statistic.
    k = math.ceil(round((1.0 - alpha) * (M + 1), 9))
    return min(max(k, 1), M)


def prediction_radius(bundle, query, center, alpha, M=DEFAULT_MC_SAMPLES, seed=0, qc=None):
    if not 0 < alpha < 1:
        raise ArgError("alpha must lie in (0, 1)")
    if M < 1000:
        raise ArgError("need at least 1000 Monte Carlo samples")
    qc = assemble_query_channel(bundle, query) if qc is None else qc
    y = observation_vector(bundle, query)
    draws = posterior_sample(qc.channel, bundle.mu, y, M, seed=seed)
    return radius_from_samples(draws, center, alpha)


def radius_from_samples(draws, center, alpha):
    dist = np.sqrt(((draws - center) ** 2).sum(axis=1))
    k = _order_index(alpha, dist.size)
    return float(np.partition(dist, k - 1)[k - 1])


@dataclass
class PredictionSet:
    center: np.ndarray
    radius: float
    alpha: float
    mc_samples: int
    query_channel: QueryChannel = field(repr=False, default=None)
    samples: np.ndarray = field(repr=False, default=None)

    def contains(self, u):
        return bool(np.linalg.norm(np.asarray(u, dtype=float) - self.center) <= self.radius)


def predict_set(bundle, query, alpha, M=DEFAULT_MC_SAMPLES, seed=0, query_id=0, keep_samples=False):
    """Center, radius and channel for one query; sampling uses the stream ``(seed, query_id)``."""
    if not 0 < alpha < 1:
        raise ArgError("alpha must lie in (0, 1)")
    if M < 1000:
        raise ArgError("need at least 1000 Monte Carlo samples")
    qc = assemble_query_channel(bundle, query)
    y = observation_vector(bundle, query)
    center = denoise_mean(qc.channel, bundle.mu, y)
    draws = posterior_sample(qc.channel, bundle.mu, y, M, seed=substream(seed, "mc-radius", query_id))
    radius = radius_from_samples(draws, center, alpha)
    return PredictionSet(center, radius, alpha, M, qc, draws if keep_samples else None)
