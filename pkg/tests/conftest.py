import json
from collections import OrderedDict

import numpy as np
import pytest

from orchamp.dataset_io import HighModel, LowModel, ModelBundle, save_matrix
from orchamp.priors import GaussianMixturePrior
from orchamp.synthetic import generate_dataset


def gaussian(dim=1, var=1.0):
    return GaussianMixturePrior([1.0], np.zeros((1, dim)), [var * np.eye(dim)])


def two_point(var=0.25):
    return GaussianMixturePrior([0.5, 0.5], [[-1.0], [1.0]], [[[var]], [[var]]])


def correlated_mu(rho=0.6, dims=2, spread=0.3):
    C = spread * ((1 - rho) * np.eye(dims) + rho * np.ones((dims, dims)))
    return GaussianMixturePrior([0.5, 0.5], [-np.ones(dims), np.ones(dims)], [C, C])


@pytest.fixture
def toy_data():
    """One rank-1 high-dim modality and one scalar low-dim modality, N=400."""
    return generate_dataset(correlated_mu(), {"a": two_point()}, {"a": [2.5]}, {"b": [[1.0]]},
                            400, {"a": 200}, seed=5)


@pytest.fixture
def toy_config(tmp_path, toy_data):
    ds, truth = toy_data
    save_matrix(tmp_path / "a.csv", ds.high["a"] * np.sqrt(ds.N))
    save_matrix(tmp_path / "b.csv", ds.low["b"])
    cfg = {"modalities": [{"id": "a", "kind": "high", "path": "a.csv", "rank": 1},
                          {"id": "b", "kind": "low", "path": "b.csv"}],
           "iterations": 2, "seed": 1, "gmm_components": 3}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def identity_bundle(p=4, lam_dims=(1,), mu=None, D=1.0, Sigma_L=1.0, low=None):
    """Hand-built bundle with one high-dim modality whose loadings make R-hat = I-like designs."""
    r = 1
    Vbar = np.ones((p, r))
    high = OrderedDict(h=HighModel(rank=r, p=p, gamma=1.0, D_hat=np.array([D]), Vbar=Vbar,
                                   Sigma_L=np.array([[Sigma_L]]), S_L=np.array([[Sigma_L * D]]),
                                   nu=gaussian()))
    lows = OrderedDict()
    for k, L in (low or {}).items():
        L = np.atleast_2d(L)
        lows[k] = LowModel(L.shape[0], L)
    dim = r + sum(m.rank for m in lows.values())
    return ModelBundle(N=1, iterations=0, high=high, low=lows, mu=mu or gaussian(dim))
