import json
from collections import OrderedDict

import numpy as np
import pytest

from orchamp.dataset_io import HighModel, LowModel, ModelBundle
from orchamp.errors import ArgError, ParseError, RankError, SchemaError
from orchamp.predict import (
    ObservedBlock,
    Query,
    assemble_query_channel,
    least_squares_point,
    load_query,
    predict_center,
    predict_set,
    prediction_radius,
    radius_from_samples,
)
from orchamp.priors import DiscretePrior, GaussianMixturePrior

from conftest import gaussian


def make_bundle(Vbar, D, Sigma_L, N=1, mu=None, low=None):
    Vbar = np.atleast_2d(np.asarray(Vbar, dtype=float))
    p, r = Vbar.shape
    D = np.atleast_1d(np.asarray(D, dtype=float))
    Sigma_L = np.atleast_2d(np.asarray(Sigma_L, dtype=float))
    high = OrderedDict(h=HighModel(rank=r, p=p, gamma=p / N, D_hat=D, Vbar=Vbar, Sigma_L=Sigma_L,
                                   S_L=Sigma_L @ np.diag(D), nu=gaussian(r)))
    lows = OrderedDict((k, LowModel(np.atleast_2d(L).shape[0], np.atleast_2d(L))) for k, L in (low or {}).items())
    dim = r + sum(m.rank for m in lows.values())
    return ModelBundle(N=N, iterations=0, high=high, low=lows, mu=mu or gaussian(dim))


def scalar_bundle(noise_var, mu=None, N=1, p=1):
    """One scalar modality whose query noise block equals ``noise_var`` when fully observed."""
    return make_bundle(np.ones((p, 1)) * np.sqrt(N), [1.0 / np.sqrt(noise_var)], [[1.0]], N=N, mu=mu)


def full_query(p, values):
    return Query([ObservedBlock("h", np.arange(p), values)])


def test_ls_identity_and_scaling():
    b = make_bundle(np.eye(2), [1.0, 1.0], np.eye(2))
    np.testing.assert_allclose(least_squares_point(b, "h", [0, 1], [0.3, -0.2]), [0.3, -0.2], atol=1e-15)
    b = make_bundle(2 * np.eye(2), [1.0, 1.0], np.eye(2))
    np.testing.assert_allclose(least_squares_point(b, "h", [0, 1], [1.0, 1.0]), [0.5, 0.5], atol=1e-15)


def test_ls_matches_pseudoinverse():
    rng = np.random.default_rng(0)
    N = 50
    V = rng.standard_normal((30, 2))
    D = np.array([2.0, 1.3])
    b = make_bundle(V, D, np.eye(2), N=N)
    Q = rng.standard_normal(30)
    R = V * D / N
    ref = np.linalg.pinv(R) @ (Q / np.sqrt(N))
    np.testing.assert_allclose(least_squares_point(b, "h", np.arange(30), Q), ref, atol=1e-10)


def test_ls_rank_deficient():
    b = make_bundle(np.ones((5, 2)), [1.0, 1.0], np.eye(2))
    with pytest.raises(RankError):
        least_squares_point(b, "h", [0, 1, 2], [1.0, 2.0, 3.0])
    b = make_bundle(np.random.default_rng(1).standard_normal((5, 2)), [1.0, 1.0], np.eye(2))
    with pytest.raises(RankError):
        least_squares_point(b, "h", [0], [1.0])


def test_query_channel_noise_blocks():
    b = make_bundle(np.ones((4, 1)), [1.0], [[1.0]])
    qc = assemble_query_channel(b, full_query(4, np.zeros(4)))
    assert qc.lambdas["h"] == 1.0 and np.allclose(qc.noise["h"], 1.0)
    qc = assemble_query_channel(b, Query([ObservedBlock("h", [2], [0.0])]))
    assert qc.lambdas["h"] == 0.25 and np.allclose(qc.noise["h"], 4.0)


def test_query_channel_general_noise():
    D = np.array([2.0, 0.5])
    Sig = np.array([[0.6, 0.1], [0.1, 0.3]])
    b = make_bundle(np.ones((10, 2)), D, Sig)
    qc = assemble_query_channel(b, Query([ObservedBlock("h", np.arange(5), np.zeros(5))]))
    ref = 2.0 * np.linalg.inv(np.diag(D) @ Sig @ np.diag(D))
    np.testing.assert_allclose(qc.noise["h"], ref, atol=1e-12)


def test_query_channel_low_design():
    L = np.array([[1.0, 0.2], [0.2, 2.0]])
    b = make_bundle(np.ones((3, 1)), [1.0], [[1.0]], low={"l": L})
    qc = assemble_query_channel(b, Query(low=[ObservedBlock("l", [0, 1], [0.1, 0.2])]))
    np.testing.assert_array_equal(qc.channel.A[:, 1:], L)
    np.testing.assert_array_equal(qc.channel.A[:, :1], 0.0)
    np.testing.assert_array_equal(qc.channel.B, np.eye(2))


def test_query_validation():
    with pytest.raises(ArgError):
        ObservedBlock("h", [], [])
    with pytest.raises(ArgError):
        ObservedBlock("h", [1, 0], [0.0, 0.0])
    with pytest.raises(ArgError):
        ObservedBlock("h", [0, 0], [0.0, 0.0])
    with pytest.raises(ArgError):
        Query()
    b = make_bundle(np.ones((3, 1)), [1.0], [[1.0]])
    with pytest.raises(ArgError):
        assemble_query_channel(b, Query([ObservedBlock("h", [5], [0.0])]))
    with pytest.raises(ArgError):
        assemble_query_channel(b, Query([ObservedBlock("zzz", [0], [0.0])]))


def test_query_json(tmp_path):
    q = Query([ObservedBlock("h", [0, 2], [1.5, -0.5])], [ObservedBlock("l", [0], [0.25])])
    path = tmp_path / "q.json"
    path.write_text(json.dumps(q.to_dict()))
    back = load_query(path)
    assert back.to_dict() == q.to_dict()
    path.write_text("{not json")
    with pytest.raises(ParseError):
        load_query(path)
    path.write_text(json.dumps({"high": [{"modality": "h", "features": [0]}]}))
    with pytest.raises(SchemaError):
        load_query(path)
    path.write_text(json.dumps({"high": [{"modality": "h", "features": [1, 0], "values": [0, 0]}]}))
    with pytest.raises(SchemaError):
        load_query(path)


def test_center_point_mass():
    u0 = np.array([0.7, -1.2])
    b = make_bundle(np.ones((3, 1)), [1.0], [[1.0]], mu=DiscretePrior(u0[None], np.ones(1)), low={"l": [[1.0]]})
    for v in ([0.0, 0.0, 0.0], [5.0, -3.0, 2.0]):
        np.testing.assert_array_equal(predict_center(b, full_query(3, v)), u0)


def test_center_conjugate_shrinkage():
    b = scalar_bundle(1.0)
    assert abs(predict_center(b, full_query(1, [1.3]))[0] - 0.65) < 1e-15


def test_center_vanishing_noise():
    b = make_bundle(np.ones((1, 1)), [1e4], [[1.0]], mu=gaussian(2), low={"l": [[1.0]]})
    b.low["l"].L_hat = np.array([[1e4]])
    y = np.array([0.8, -0.4])
    q = Query([ObservedBlock("h", [0], [y[0] * 1e4])], [ObservedBlock("l", [0], [y[1] * 1e4])])
    np.testing.assert_allclose(predict_center(b, q), y, atol=1e-3)


def test_radius_examples():
    pm = DiscretePrior(np.array([[0.3]]), np.ones(1))
    b = scalar_bundle(1.0, mu=pm)
    q = full_query(1, [2.0])
    assert prediction_radius(b, q, np.array([0.3]), 0.1, 1000) == 0.0
    b = scalar_bundle(1 / 3)
    r = prediction_radius(b, q, predict_center(b, q), 0.05, 100_000, seed=0)
    assert 0.97 <= r <= 0.99
    draws = np.vstack([np.full((500, 1), -1.0), np.full((500, 1), 1.0)])
    assert radius_from_samples(draws, np.zeros(1), 0.5) == 1.0


def test_radius_argument_checks():
    b = scalar_bundle(1.0)
    q = full_query(1, [0.0])
    with pytest.raises(ArgError):
        prediction_radius(b, q, np.zeros(1), 0.1, 999)
    with pytest.raises(ArgError):
        predict_set(b, q, 1.0)


def test_radius_monotone_in_alpha():
    b = make_bundle(np.ones((4, 1)), [1.0], [[1.0]], mu=gaussian(2), low={"l": [[1.0]]})
    q = Query([ObservedBlock("h", [0, 1], [0.5, 0.2])])
    radii = [predict_set(b, q, a, 5000, seed=3).radius for a in (0.01, 0.05, 0.1, 0.3, 0.5, 0.9)]
    assert np.all(np.diff(radii) <= 0)


def test_radius_convergence_in_m():
    b = scalar_bundle(1 / 3)
    q = full_query(1, [0.4])
    r1 = predict_set(b, q, 0.1, 50_000, seed=1).radius
    r2 = predict_set(b, q, 0.1, 100_000, seed=1).radius
    # MC sd of the 0.9 quantile of |N(0, 0.25)| at M = 5e4 is about 0.004
    assert abs(r1 - r2) < 2 * 0.0045


def test_predict_set_deterministic_and_stream():
    b = scalar_bundle(0.5, mu=GaussianMixturePrior([0.5, 0.5], [[-1.0], [1.0]], [[[0.2]], [[0.2]]]))
    q = full_query(1, [0.3])
    a = predict_set(b, q, 0.1, 2000, seed=7, query_id=4, keep_samples=True)
    c = predict_set(b, q, 0.1, 2000, seed=7, query_id=4, keep_samples=True)
    d = predict_set(b, q, 0.1, 2000, seed=7, query_id=5, keep_samples=True)
    assert a.radius == c.radius and np.array_equal(a.samples, c.samples)
    assert not np.array_equal(a.samples, d.samples)


def test_conjugate_interval():
    noise = 0.6
    b = scalar_bundle(noise)
    Q = 1.1
    y = Q * np.sqrt(noise)  # least-squares point Q / D_hat
    ps = predict_set(b, full_query(1, [Q]), 0.05, 100_000, seed=2)
    post_var = noise / (1 + noise)
    assert abs(ps.center[0] - y / (1 + noise)) < 1e-6
    assert abs(ps.radius - 1.959963984540054 * np.sqrt(post_var)) < 0.01
    assert ps.contains(ps.center) and not ps.contains(ps.center + ps.radius + 1e-9)
