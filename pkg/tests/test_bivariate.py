import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from firespde.bivariate import (
    Stage3Config,
    cell_predictive_cdf,
    conditional_moments,
    eta_prior_logpdf,
    impute_missing_w,
    predictive_cdf,
    run_stage3,
    w_loglik,
)
from firespde.exceptions import ParameterError
from firespde.gmrf import SpdeOperator, approx_covariance
from firespde.mcmc import Chain, make_rng
from firespde.mesh import MeshConfig, assemble_fem
from firespde.smoother import StandardizedPanel, Surfaces
from firespde.synthetic import SimConfig, simulate

from conftest import ks_distance


def test_predictive_cdf_examples():
    assert predictive_cdf(0.6, 1.3, 0.5, 0.0) == pytest.approx(0.4)
    assert predictive_cdf(0.6, 1.3, 0.5, math.exp(1.3)) == pytest.approx(0.7, abs=1e-15)
    assert predictive_cdf(0.6, 1.3, 0.5, math.exp(1.3 + 10 * math.sqrt(0.5))) >= 1 - 1e-6
    with pytest.raises(ParameterError):
        predictive_cdf(0.6, 1.3, 0.0, 1.0)
    with pytest.raises(ParameterError):
        predictive_cdf(1.2, 1.3, 0.5, 1.0)
    with pytest.raises(ParameterError):
        predictive_cdf(0.5, 1.3, 0.5, -1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(-5, 5), st.floats(0.01, 9),
       st.lists(st.floats(0, 1e4), min_size=2, max_size=30))
def test_predictive_cdf_monotone(p, mu, s2, us):
    u = np.sort(np.asarray(us))
    F = predictive_cdf(np.full_like(u, p), mu, s2, u)
    assert np.all(np.diff(F) >= 0)
    assert np.all((F >= 0) & (F <= 1))
    assert F[0] >= 1 - p - 1e-15
    # right-continuity at zero: tiny positive thresholds approach 1 - p
    assert predictive_cdf(p, mu, s2, 1e-300) == pytest.approx(1 - p, abs=1e-12)


def test_conditional_moments_limits():
    eta = np.array([[0.2, -0.4]])
    m, v = conditional_moments(eta, np.array([[np.nan, np.nan]]), 1.0, 0.5)
    np.testing.assert_array_equal(v, 0.0)
    np.testing.assert_array_equal(m, eta)
    w = 1.7
    m, v = conditional_moments(eta, np.array([[w, np.nan]]), 0.3, 1 - 1e-12)
    assert m[0, 1] == pytest.approx(-0.4 + (w - 0.2), abs=1e-9)
    assert m[0, 0] == w and v[0, 0] == 0.0
    assert v[0, 1] == pytest.approx(0.0, abs=1e-9)
    m, v = conditional_moments(eta, np.array([[np.nan, w]]), 0.3, 0.5)
    assert m[0, 0] == pytest.approx(0.2 + 0.5 * (w + 0.4))
    assert v[0, 0] == pytest.approx(0.7 * 0.75)


def _toy_chain(n, r, rho, eta=(0.1, -0.2), w_obs=(np.inf, np.inf)):
    ch = Chain(meta={"N": 1, "T": 1, "predict_cells": [0], "w_obs": [list(w_obs)]})
    for _ in range(n):
        ch.append(r=r, rho=rho, eta_pred=np.array([eta]))
    return ch


def test_impute_independent_when_rho_zero(rng):
    ch = _toy_chain(10_000, 0.4, 0.0, w_obs=(np.inf, np.inf))
    obs1 = rng.standard_normal(10_000)
    draws = np.array([impute_missing_w(_toy_chain(1, 0.4, 0.0), (0, 0), rng, w_obs=[w, np.nan])[0] for w in obs1[:2000]])
    assert abs(np.corrcoef(obs1[:2000], draws[:, 1])[0, 1]) < 0.05
    pairs = impute_missing_w(ch, (0, 0), rng)
    assert abs(np.corrcoef(pairs.T)[0, 1]) < 0.05


def test_impute_pair_correlation(rng):
    ch = _toy_chain(20_000, 0.4, 0.7)
    pairs = impute_missing_w(ch, (0, 0), rng)
    assert np.corrcoef(pairs.T)[0, 1] == pytest.approx(0.7, abs=0.05)
    assert pairs.var(axis=0) == pytest.approx([0.6, 0.6], rel=0.05)
    with pytest.raises(ParameterError):
        impute_missing_w(_toy_chain(2, 0.4, 0.7, w_obs=(1.0, 2.0)), (0, 0), rng)
    with pytest.raises(ParameterError):
        impute_missing_w(ch, (3, 0), rng)


def test_cell_predictive_cdf_matches_formula():
    ch = _toy_chain(3, 0.5, 0.3)
    s = Surfaces(np.array([1.0]), np.array([2.0]), np.array([0.5]), np.array([0.7]))
    u = np.array([0.0, 1.0, math.exp(1.2), 50.0])
    _, F = cell_predictive_cdf(ch, s, np.array([[0.8]]), u, variable=0)
    ref = predictive_cdf(0.8, 1.0 + 2.0 * 0.1, 4.0 * 0.5, u)
    np.testing.assert_allclose(F[0], ref, atol=1e-14)


def test_loglik_pieces_match_dense():
    from scipy import stats

    rng = np.random.default_rng(0)
    m, T, r, rho = 4, 3, 0.6, 0.4
    B = rng.standard_normal((m, m))
    Q = B @ B.T + m * np.eye(m)
    eta = rng.standard_normal((m, T, 2))
    G = np.einsum("mtp,mn,ntq->pq", eta, Q, eta)
    R = np.array([[1, rho], [rho, 1]])
    cov = r * np.kron(R, np.linalg.inv(Q))
    ref = sum(stats.multivariate_normal(np.zeros(2 * m), cov).logpdf(eta[:, t, :].T.ravel()) for t in range(T))
    assert eta_prior_logpdf(G, np.linalg.slogdet(Q)[1], m, T, r, rho) == pytest.approx(ref, abs=1e-10)
    N = 5
    e = rng.standard_normal((N, T, 2))
    S = np.einsum("ntp,ntq->pq", e, e)
    cov = (1 - r) * np.kron(R, np.eye(N))
    ref = sum(stats.multivariate_normal(np.zeros(2 * N), cov).logpdf(e[:, t, :].T.ravel()) for t in range(T))
    assert w_loglik(S, N, T, r, rho) == pytest.approx(ref, abs=1e-10)


def test_separable_covariance():
    # compared on the correlation scale: small meshes inflate marginal variances
    cfg = SimConfig(nx=5, ny=4, T=20_000, phi_eta=2.0, r_eta=0.7, rho_eta=0.5, mesh=MeshConfig(node_ratio=0.5))
    _, truth = simulate(cfg, make_rng(21))
    W = truth.W
    N = W.shape[0]
    X = np.concatenate([W[:, :, 0], W[:, :, 1]], axis=0)
    emp = X @ X.T / X.shape[1]
    Q = SpdeOperator(assemble_fem(truth.mesh)).precision(2.0).Q
    S = approx_covariance(truth.A, Q, 0.7, cap=N)
    ref = np.kron(np.array([[1, 0.5], [0.5, 1]]), S)
    d = np.sqrt(np.diag(ref))
    assert np.abs((emp - ref) / np.outer(d, d)).max() < 0.05


@pytest.mark.slow
def test_decoupling_when_rho_fixed_zero():
    # component 2 entirely missing and rho = 0: it carries no information,
    # so the range posterior must equal that of a one-component run
    cfg = SimConfig(nx=5, ny=4, T=30, mesh=MeshConfig(node_ratio=0.5))
    _, truth = simulate(cfg, make_rng(3))
    N, T = truth.W.shape[:2]
    present = np.zeros((N, T, 2), bool)
    present[:, :, 0] = True
    none = np.zeros((N, T), bool)
    W2 = StandardizedPanel(np.where(present, truth.W, np.nan), present, truth.locations)
    W1 = StandardizedPanel(truth.W[:, :, :1], present[:, :, :1], truth.locations)
    kw = dict(iterations=42_000, burn_in=2000, thin=10)
    a = run_stage3(W2, truth.mesh, Stage3Config(**kw, fixed={"rho": 0.0}), make_rng(1), A=truth.A,
                   predict_cells=none)
    b = run_stage3(W1, truth.mesh, Stage3Config(**kw), make_rng(2), A=truth.A, predict_cells=none)
    assert ks_distance(a["phi"], b["phi"]) < 0.05


def test_resume_matches_uninterrupted(tmp_path):
    cfg = SimConfig(nx=5, ny=4, T=6, mesh=MeshConfig(node_ratio=0.5))
    _, truth = simulate(cfg, make_rng(4))
    present = np.random.default_rng(0).random(truth.W.shape) < 0.8
    W = StandardizedPanel(np.where(present, truth.W, np.nan), present, truth.locations)
    c = Stage3Config(120, 40, 2, checkpoint_every=30)
    a = run_stage3(W, truth.mesh, c, make_rng(9), A=truth.A)
    ck = tmp_path / "s3.json"
    run_stage3(W, truth.mesh, c, make_rng(9), A=truth.A, checkpoint_path=ck, stop=70)
    b = run_stage3(W, truth.mesh, c, make_rng(1), A=truth.A, checkpoint_path=ck, resume=True)
    np.testing.assert_array_equal(a["rho"], b["rho"])
    np.testing.assert_array_equal(a["eta_pred"], b["eta_pred"])


def test_rho_support(rng):
    cfg = SimConfig(nx=5, ny=4, T=10, mesh=MeshConfig(node_ratio=0.5))
    _, truth = simulate(cfg, make_rng(5))
    present = np.ones(truth.W.shape, bool)
    ch = run_stage3(StandardizedPanel(truth.W, present, truth.locations), truth.mesh,
                    Stage3Config(200, 50, 1), rng, A=truth.A)
    assert np.all((ch["rho"] > 0) & (ch["rho"] < 1))
    with pytest.raises(ParameterError):
        Stage3Config(rho_lower=0.5)


@pytest.mark.slow
def test_imputed_pairs_follow_rho():
    cfg = SimConfig(nx=6, ny=5, T=40, rho_eta=0.6, mesh=MeshConfig(node_ratio=0.5))
    _, truth = simulate(cfg, make_rng(6))
    present = np.random.default_rng(1).random(truth.W.shape[:2]) < 0.8
    present = np.repeat(present[:, :, None], 2, axis=2)
    W = StandardizedPanel(np.where(present, truth.W, np.nan), present, truth.locations)
    ch = run_stage3(W, truth.mesh, Stage3Config(3000, 1000, 2), make_rng(7), A=truth.A)
    rng = make_rng(8)
    T = truth.W.shape[1]
    resid = []
    for flat in ch.meta["predict_cells"][:60]:
        cell = divmod(flat, T)
        pos = ch.meta["predict_cells"].index(flat)
        resid.append(impute_missing_w(ch, cell, rng) - ch["eta_pred"][:, pos, :])
    resid = np.concatenate(resid)
    assert np.corrcoef(resid.T)[0, 1] == pytest.approx(ch["rho"].mean(), abs=0.05)
