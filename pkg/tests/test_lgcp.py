import math

import numpy as np
import pytest
from scipy import stats

from firespde.exceptions import ParameterError
from firespde.gmrf import SpdeOperator
from firespde.lgcp import (
    LgcpConfig,
    LgcpSampler,
    lgcp_predictive_cdf,
    log_intensity_grad,
    poisson_grad,
    poisson_loglik,
    run_lgcp,
    zeta_conditional,
)
from firespde.mcmc import make_rng
from firespde.mesh import MeshConfig, assemble_fem, build_mesh, project
from firespde.synthetic import grid_locations


def test_gradient_finite_differences(rng):
    lam = rng.normal(0.5, 1.0, size=(6, 4))
    y = rng.poisson(3.0, size=(6, 4)).astype(float)
    obs = rng.random((6, 4)) < 0.8
    g = poisson_grad(lam, y, obs)
    h = 1e-5
    for idx in np.ndindex(lam.shape):
        e = np.zeros_like(lam)
        e[idx] = h
        fd = (poisson_loglik(lam + e, y, obs) - poisson_loglik(lam - e, y, obs)) / (2 * h)
        assert abs(fd - g[idx]) < 1e-6
    mean, var = 0.2, 0.7
    gl = log_intensity_grad(lam, y, obs, mean, var)
    np.testing.assert_allclose(gl, g - (lam - mean) / var, rtol=0, atol=1e-15)


def test_zeta_conditional_matches_dense(grid8, rng):
    loc, mesh = grid8
    A = project(mesh, loc).toarray()
    Q = SpdeOperator(assemble_fem(mesh)).precision(2.0).Q
    s2, r = 0.8, 0.6
    resid = rng.standard_normal(len(loc))
    M, b = zeta_conditional(A, Q, resid, s2, r)
    mean = np.linalg.solve(M.toarray(), b)
    prior = s2 * r * np.linalg.inv(Q.toarray())
    K = A @ prior @ A.T + s2 * (1 - r) * np.eye(len(loc))
    ref_mean = prior @ A.T @ np.linalg.solve(K, resid)
    ref_cov = prior - prior @ A.T @ np.linalg.solve(K, A @ prior)
    np.testing.assert_allclose(mean, ref_mean, atol=1e-9)
    np.testing.assert_allclose(np.linalg.inv(M.toarray()), ref_cov, atol=1e-9)


def test_predictive_cdf_examples():
    F = lgcp_predictive_cdf(np.array([[0.0]]), np.array([0.0, 1e6]))
    assert F[0, 0] == pytest.approx(math.exp(-1), abs=1e-15)
    assert F[0, 1] == 1.0
    lam = np.random.default_rng(0).normal(1.0, 1.0, (50, 7))
    F = lgcp_predictive_cdf(lam, np.arange(40))
    assert np.all(np.diff(F, axis=1) >= 0)


def _small(rng, rate=4.0, T=10, side=6):
    loc = grid_locations(side, side, 1.0)
    mesh = build_mesh(loc, MeshConfig())
    y = rng.poisson(rate, (len(loc), T))
    return loc, mesh, y


def test_zero_step_keeps_lambda(rng):
    loc, mesh, y = _small(rng)
    s = LgcpSampler(y, np.ones_like(y, bool), np.ones((len(loc), 1)), mesh,
                    LgcpConfig(iterations=10, burn_in=0, thin=1, step_a=0.0), rng, locations=loc)
    before = s.lam.copy()
    for _ in range(5):
        s.step(rng)
    np.testing.assert_array_equal(s.lam, before)


def test_constant_rate_recovered():
    rng = make_rng(1)
    loc, mesh, y = _small(rng)
    cfg = LgcpConfig(iterations=6000, burn_in=3000, thin=3, batch=10)
    ch = run_lgcp(y, np.ones_like(y, bool), np.ones((len(loc), 1)), mesh, cfg, rng, locations=loc)
    assert np.mean(ch["mean_rate"]) == pytest.approx(4.0, rel=0.10)
    assert ch.meta["clamped"] == 0


def test_missing_cells_predicted(rng):
    loc, mesh, y = _small(rng, T=4)
    obs = np.ones_like(y, bool)
    obs[:5, 1] = False
    y = np.where(obs, y, -1)
    ch = run_lgcp(y, obs, np.ones((len(loc), 1)), mesh, LgcpConfig(400, 200, 2, batch=2), rng, locations=loc)
    assert ch["lam_pred"].shape == (100, 5)
    F = lgcp_predictive_cdf(ch, np.arange(30))
    assert F.shape == (5, 30)


def test_input_errors(rng):
    loc, mesh, y = _small(rng, T=4)
    obs = np.ones_like(y, bool)
    with pytest.raises(ParameterError):
        run_lgcp(y, obs, np.ones((len(loc), 1)), mesh, LgcpConfig(10, 5, 1, batch=5), rng, locations=loc)
    with pytest.raises(ParameterError):
        run_lgcp(y - 10, obs, np.ones((len(loc), 1)), mesh, LgcpConfig(10, 5, 1, batch=2), rng, locations=loc)
    with pytest.raises(ParameterError):
        LgcpConfig(step_a=-1.0)


def test_clamp_warns(rng):
    loc, mesh, y = _small(rng, T=2)
    # counts beyond exp(30) drive the intensity past the cap
    y = np.full(y.shape, 10 ** 14)
    cfg = LgcpConfig(4, 1, 1, batch=2, step_a=5.0, fixed={"beta": np.array([29.9]), "s2": 1.0, "r": 0.5},
                     init={"lam": np.full(y.shape, 29.9)})
    with pytest.warns(UserWarning, match="clamped"):
        ch = run_lgcp(y, np.ones_like(y, bool), np.ones((len(loc), 1)), mesh, cfg, rng, locations=loc)
    assert ch.meta["clamped"] > 0


def _two_pixel_posterior(y, mean, cov, grid):
    """Marginals of independent-period 2-d log-intensity posteriors on a grid."""
    g0, g1 = np.meshgrid(grid, grid, indexing="ij")
    pts = np.stack([g0, g1], axis=-1)
    prior = stats.multivariate_normal(mean, cov).logpdf(pts)
    lik = y[0] * g0 - np.exp(g0) + y[1] * g1 - np.exp(g1)
    w = np.exp(prior + lik - (prior + lik).max())
    w /= w.sum()
    return w.sum(axis=1), w.sum(axis=0)


@pytest.mark.slow
def test_two_pixel_langevin_target():
    # mesh of three nodes, two pixels inside it; hyperparameters fixed
    nodes = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]])
    mesh = build_mesh(nodes, MeshConfig(node_ratio=1.0, extension=0.0))
    loc = np.array([[0.4, 0.4], [1.2, 0.5]])
    A = project(mesh, loc)
    y = np.array([[3, 0], [7, 2]])
    beta, s2, phi, r = 0.8, 0.9, 1.0, 0.5
    cfg = LgcpConfig(iterations=60_000, burn_in=2000, thin=2, batch=2, step_a=0.1, step_c=1e15,
                     fixed={"beta": np.array([beta]), "s2": s2, "phi": phi, "r": r})
    ch = run_lgcp(y, np.ones((2, 2), bool), np.ones((2, 1)), mesh, cfg, make_rng(3), A=A,
                  predict_cells=np.ones((2, 2), bool))
    Q = SpdeOperator(assemble_fem(mesh)).precision(phi).Q.toarray()
    Ad = A.toarray()
    cov = s2 * (r * Ad @ np.linalg.solve(Q, Ad.T) + (1 - r) * np.eye(2))
    grid = np.linspace(-4, 5, 901)
    draws = ch["lam_pred"]  # columns: (pixel 0, t0), (0, t1), (1, t0), (1, t1)
    for t in range(2):
        m0, m1 = _two_pixel_posterior(y[:, t], np.full(2, beta), cov, grid)
        for pix, marg in ((0, m0), (1, m1)):
            cdf = np.cumsum(marg)
            x = np.sort(draws[:, pix * 2 + t])
            emp = np.searchsorted(x, grid, side="right") / len(x)
            assert np.max(np.abs(emp - cdf)) < 0.08
