"""Separable bivariate SPDE model for standardized log burnt area and log count.

For period ``t`` the 2N-vector of standardized values is

    W_t = (I_2 kron A) eta_t + e_t,
    eta_t ~ N(0, r R kron Q(phi)^-1),   e_t ~ N(0, (1 - r) R kron I_N),

with ``R = [[1, rho], [rho, 1]]``. Missing cells are imputed every sweep,
which makes the conditional precision of ``eta_t`` the same for every
period: ``R^-1 kron M`` with ``M = A'A / (1 - r) + Q / r``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import pdist
from scipy.special import ndtr

from .evaluation import validate_cdf
from .exceptions import ParameterError
from .gmrf import SpdeOperator
from .mcmc import BoundedWalk, Chain, run_sampler
from .mesh import TriMesh, assemble_fem, project
from .smoother import StandardizedPanel, Surfaces

__all__ = [
    "Stage3Config",
    "run_stage3",
    "impute_missing_w",
    "predictive_cdf",
    "cell_predictive_cdf",
    "conditional_moments",
    "eta_prior_logpdf",
    "w_loglik",
    "write_prediction_csv",
]


@dataclass
class Stage3Config:
    """MCMC settings for the bivariate model.

    ``rho_lower`` is the lower end of the uniform prior on ``rho``; 0 gives
    the (0, 1) support and -1 the full correlation range.
    """

    iterations: int = 60_000
    burn_in: int = 10_000
    thin: int = 5
    s_phi: float = 0.3
    s_r: float = 0.3
    s_rho: float = 0.3
    adapt: bool = True
    rho_lower: float = 0.0
    checkpoint_every: int = 0
    keep_latent: bool = False
    fixed: dict = field(default_factory=dict)
    init: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.burn_in < self.iterations:
            raise ParameterError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ParameterError("thin must be at least 1")
        if self.rho_lower not in (0.0, -1.0):
            raise ParameterError("rho_lower must be 0 or -1")


def _corr(rho, k):
    return np.array([[1.0]]) if k == 1 else np.array([[1.0, rho], [rho, 1.0]])


def eta_prior_logpdf(G, logdet_q, m, T, r, rho):
    """``sum_t log N(eta_t; 0, r R kron Q^-1)``.

    ``G[p, q] = sum_t eta_pt' Q eta_qt`` and ``logdet_q = log|Q|`` with
    ``Q`` of size ``m``.
    """
    k = G.shape[0]
    R = _corr(rho, k)
    Rinv = np.linalg.inv(R)
    logdet_R = math.log(np.linalg.det(R))
    logdet_prec = -m * logdet_R + k * logdet_q
    return T * (0.5 * logdet_prec - 0.5 * k * m * math.log(2 * math.pi * r)) - 0.5 * float(np.sum(Rinv * G)) / r


def w_loglik(S, N, T, r, rho):
    """``sum_t log N(W_t; (I kron A) eta_t, (1 - r) R kron I)``.

    ``S[p, q] = sum_{i,t} e_pit e_qit`` for residuals ``e = W - A eta``.
    """
    k = S.shape[0]
    R = _corr(rho, k)
    Rinv = np.linalg.inv(R)
    logdet = N * (k * math.log(1 - r) + math.log(np.linalg.det(R)))
    return -0.5 * (T * (k * N * math.log(2 * math.pi) + logdet) + float(np.sum(Rinv * S)) / (1 - r))


def conditional_moments(eta_loc, w_obs, r, rho):
    """Mean and variance of each component of ``W`` at one cell given the latent field.

    Parameters
    ----------
    eta_loc : ndarray, shape (..., 2)
        Projected latent values ``(A eta)_i`` per component.
    w_obs : ndarray, shape (..., 2)
        Observed standardized values, NaN where missing.
    r, rho : float or ndarray broadcastable to ``eta_loc[..., 0]``

    Returns
    -------
    mean, var : ndarray, shape (..., 2)
        Observed components come back with their value and zero variance.
    """
    eta_loc = np.asarray(eta_loc, dtype=float)
    w_obs = np.broadcast_to(np.asarray(w_obs, dtype=float), eta_loc.shape)
    r = np.asarray(r, dtype=float)
    rho = np.asarray(rho, dtype=float)
    obs = np.isfinite(w_obs)
    mean = eta_loc.copy()
    var = np.broadcast_to((1 - r)[..., None] if r.ndim else (1 - r), eta_loc.shape).astype(float).copy()
    for p in range(2):
        q = 1 - p
        only_other = ~obs[..., p] & obs[..., q]
        adj = eta_loc[..., p] + rho * (np.where(obs[..., q], w_obs[..., q], 0.0) - eta_loc[..., q])
        mean[..., p] = np.where(only_other, adj, mean[..., p])
        var[..., p] = np.where(only_other, (1 - r) * (1 - rho * rho), var[..., p])
    mean = np.where(obs, w_obs, mean)
    var = np.where(obs, 0.0, var)
    return mean, var


class BivariateSampler:
    """Markov chain for the separable model; handles one or two components."""

    def __init__(self, W: StandardizedPanel, mesh: TriMesh, config: Stage3Config, rng,
                 A=None, predict_cells=None):
        w = np.asarray(W.w, dtype=float)
        present = np.asarray(W.present, dtype=bool) & np.isfinite(w)
        if w.ndim == 2:
            w, present = w[:, :, None], present[:, :, None]
        self.N, self.T, self.k = w.shape
        if self.k not in (1, 2):
            raise ParameterError("standardized panel must have one or two components")
        if present.sum() < self.T:
            raise ParameterError("fewer than one present cell per period on average")
        self.config = config
        self.present = present
        self.w_obs = np.where(present, w, np.nan)
        if A is None:
            if W.locations is None:
                raise ParameterError("standardized panel carries no locations; pass A")
            A = project(mesh, W.locations)
        self.A = sp.csr_matrix(A)
        self.At = self.A.T.tocsr()
        self.AtA = (self.At @ self.A).tocsr()
        self.op = SpdeOperator(assemble_fem(mesh))
        self.m = self.op.n
        locs = W.locations if W.locations is not None else self.A @ mesh.nodes
        self.delta = float(pdist(np.asarray(locs)).max())
        if predict_cells is None:
            predict_cells = ~present.all(axis=2)
        self.pred_idx = np.flatnonzero(np.asarray(predict_cells).ravel())
        self.fixed = dict(config.fixed)
        if self.k == 1:
            self.fixed["rho"] = 0.0
        self.walk_phi = BoundedWalk(0.0, 2.0 * self.delta, config.s_phi)
        self.walk_r = BoundedWalk(0.0, 1.0, config.s_r)
        self.walk_rho = BoundedWalk(config.rho_lower, 1.0, config.s_rho)
        self.chain = Chain(meta={
            "N": self.N, "T": self.T, "k": self.k, "delta": self.delta,
            "predict_cells": self.pred_idx.tolist(),
            "w_obs": np.nan_to_num(self.w_obs.reshape(-1, self.k)[self.pred_idx], nan=np.inf).tolist()
            if self.pred_idx.size else [],
        })
        init = {**config.init, **self.fixed}
        self.phi = float(init.get("phi", self.delta / 10.0))
        self.r = float(init.get("r", 0.5))
        rho0 = 0.5 * (config.rho_lower + 1.0) if self.k == 2 else 0.0
        if self.k == 2 and present.all(axis=2).sum() > 2:
            both = present.all(axis=2)
            rho0 = float(np.corrcoef(w[both][:, 0], w[both][:, 1])[0, 1])
            rho0 = min(max(rho0, config.rho_lower + 0.05), 0.95)
        self.rho = float(init.get("rho", rho0))
        self.eta = np.zeros((self.m, self.T, self.k))
        self._refresh_prior()
        self.W = np.where(present, w, 0.0)
        self._impute(rng)

    # ---------------------------------------------------------------- helpers
    def _refresh_prior(self):
        self.Q = self.op.precision(self.phi).Q
        self.logdetQ = self.op.factor(self.Q).logdet()
        self.G = self._gram(self.Q)

    def _gram(self, Q):
        QE = np.stack([Q @ self.eta[:, :, p] for p in range(self.k)], axis=2)
        return np.einsum("mtp,mtq->pq", self.eta, QE)

    def _projected(self):
        return np.stack([self.A @ self.eta[:, :, p] for p in range(self.k)], axis=2)

    def _resid_gram(self):
        e = self.W - self._projected()
        return np.einsum("ntp,ntq->pq", e, e)

    # ---------------------------------------------------------------- updates
    def step(self, rng, adapt=False):
        self._update_eta(rng)
        adapt = adapt and self.config.adapt
        if "phi" not in self.fixed:
            self._update_phi(rng, adapt)
        if "r" not in self.fixed:
            self._update_r(rng, adapt)
        if "rho" not in self.fixed:
            self._update_rho(rng, adapt)
        self._impute(rng)

    def _update_eta(self, rng):
        v = 1.0 - self.r
        fac = self.op.factor((self.AtA / v + self.Q / self.r).tocsr())
        Lr = np.linalg.cholesky(_corr(self.rho, self.k))
        z = rng.standard_normal((self.m, self.T * self.k))
        noise = fac.solve_upper(z).reshape(self.m, self.T, self.k) @ Lr.T
        rhs = np.concatenate([self.At @ self.W[:, :, p] for p in range(self.k)], axis=1) / v
        mean = fac.solve(rhs).reshape(self.m, self.k, self.T).transpose(0, 2, 1)
        self.eta = mean + noise
        self.G = self._gram(self.Q)

    def _update_phi(self, rng, adapt):
        cand = self.walk_phi.propose(self.phi, rng)
        Qc = self.op.precision(cand).Q
        logdet_c = self.op.factor(Qc).logdet()
        Gc = self._gram(Qc)
        lr = (eta_prior_logpdf(Gc, logdet_c, self.m, self.T, self.r, self.rho)
              - eta_prior_logpdf(self.G, self.logdetQ, self.m, self.T, self.r, self.rho)
              + self.walk_phi.log_jacobian(cand) - self.walk_phi.log_jacobian(self.phi))
        if self.walk_phi.accept(lr, rng, adapt):
            self.phi, self.Q, self.logdetQ, self.G = cand, Qc, logdet_c, Gc

    def _log_target(self, S, r, rho):
        return (w_loglik(S, self.N, self.T, r, rho)
                + eta_prior_logpdf(self.G, self.logdetQ, self.m, self.T, r, rho))

    def _update_r(self, rng, adapt):
        cand = self.walk_r.propose(self.r, rng)
        S = self._resid_gram()
        lr = (self._log_target(S, cand, self.rho) - self._log_target(S, self.r, self.rho)
              + self.walk_r.log_jacobian(cand) - self.walk_r.log_jacobian(self.r))
        if self.walk_r.accept(lr, rng, adapt):
            self.r = cand

    def _update_rho(self, rng, adapt):
        cand = self.walk_rho.propose(self.rho, rng)
        S = self._resid_gram()
        lr = (self._log_target(S, self.r, cand) - self._log_target(S, self.r, self.rho)
              + self.walk_rho.log_jacobian(cand) - self.walk_rho.log_jacobian(self.rho))
        if self.walk_rho.accept(lr, rng, adapt):
            self.rho = cand

    def _impute(self, rng):
        proj = self._projected()
        if self.k == 1:
            draw = proj + math.sqrt(1 - self.r) * rng.standard_normal(proj.shape)
            self.W = np.where(self.present, self.W, draw)
            return
        mean, var = conditional_moments(proj, self.w_obs, self.r, self.rho)
        z = rng.standard_normal(proj.shape)
        both_missing = ~self.present.any(axis=2)
        # both components missing: correlated pair from (1 - r) R
        s = math.sqrt(1 - self.r)
        pair0 = proj[..., 0] + s * z[..., 0]
        pair1 = proj[..., 1] + s * (self.rho * z[..., 0] + math.sqrt(1 - self.rho ** 2) * z[..., 1])
        one = mean + np.sqrt(var) * z
        new = np.where(both_missing[..., None], np.stack([pair0, pair1], axis=2), one)
        self.W = np.where(self.present, self.W, new)

    # -------------------------------------------------------------- bookkeeping
    def finite(self):
        return bool(np.isfinite(self.eta).all() and np.isfinite(self.W).all())

    def record(self):
        draw = dict(phi=self.phi, r=self.r, rho=self.rho)
        if self.pred_idx.size:
            draw["eta_pred"] = self._projected().reshape(-1, self.k)[self.pred_idx]
        if self.config.keep_latent:
            draw["W"] = self.W
            draw["eta"] = self.eta
        self.chain.append(**draw)

    def finish(self):
        self.chain.meta.update(accept_phi=self.walk_phi.rate, accept_r=self.walk_r.rate,
                               accept_rho=self.walk_rho.rate)
        return self.chain

    def checkpoint(self):
        return {
            "phi": self.phi, "r": self.r, "rho": self.rho,
            "eta": self.eta.ravel().tolist(), "W": self.W.ravel().tolist(),
            "walks": [w.state() for w in (self.walk_phi, self.walk_r, self.walk_rho)],
            "chain": self.chain.to_json(),
        }

    def restore(self, s):
        self.phi, self.r, self.rho = float(s["phi"]), float(s["r"]), float(s["rho"])
        self.eta = np.asarray(s["eta"], dtype=float).reshape(self.m, self.T, self.k)
        self.W = np.asarray(s["W"], dtype=float).reshape(self.N, self.T, self.k)
        for walk, st in zip((self.walk_phi, self.walk_r, self.walk_rho), s["walks"]):
            walk.load(st)
        self.chain = Chain.from_json(s["chain"])
        self._refresh_prior()


def run_stage3(W: StandardizedPanel, mesh: TriMesh, config: Stage3Config | None = None, rng=None, *,
               A=None, predict_cells=None, checkpoint_path=None, resume=False, stop=None) -> Chain:
    """Sample the bivariate model on a standardized panel.

    Parameters
    ----------
    W : StandardizedPanel
        Values of shape (N, T, 2) (or (N, T, 1) for a single component)
        with their presence mask.
    mesh : TriMesh
    config : Stage3Config
    rng : numpy.random.Generator
    predict_cells : ndarray of bool, shape (N, T), optional
        Cells whose projected latent values are stored per draw; defaults
        to every cell with at least one missing component.

    Returns
    -------
    Chain
        Scalars ``phi``, ``r``, ``rho`` and per-draw ``eta_pred`` of shape
        (n_cells, k).
    """
    config = config or Stage3Config()
    if rng is None:
        rng = np.random.default_rng()
    sampler = BivariateSampler(W, mesh, config, rng, A=A, predict_cells=predict_cells)
    run_sampler(sampler, config, rng, checkpoint_path=checkpoint_path, resume=resume, stop=stop)
    return sampler.finish()


def _cell_position(chain, cell):
    i, t = cell
    flat = i * chain.meta["T"] + t
    idx = chain.meta["predict_cells"]
    try:
        return idx.index(flat)
    except ValueError:
        raise ParameterError(f"cell {cell} was not stored during sampling") from None


def _stored_obs(chain, pos):
    w = np.asarray(chain.meta["w_obs"][pos], dtype=float)
    return np.where(np.isinf(w), np.nan, w)


def impute_missing_w(chain: Chain, cell, rng=None, w_obs=None) -> np.ndarray:
    """One bivariate draw per retained chain draw at a cell with missing components.

    Observed components are returned unchanged; a single missing component
    is drawn conditionally on the observed one.
    """
    rng = rng if rng is not None else np.random.default_rng()
    pos = _cell_position(chain, cell)
    eta = chain["eta_pred"][:, pos, :]
    obs = _stored_obs(chain, pos) if w_obs is None else np.asarray(w_obs, dtype=float)
    if np.isfinite(obs).all():
        raise ParameterError(f"cell {cell} has no missing component")
    r, rho = chain["r"], chain["rho"]
    z = rng.standard_normal(eta.shape)
    s = np.sqrt(1 - r)
    if not np.isfinite(obs).any():
        w0 = eta[:, 0] + s * z[:, 0]
        w1 = eta[:, 1] + s * (rho * z[:, 0] + np.sqrt(1 - rho ** 2) * z[:, 1])
        return np.column_stack([w0, w1])
    mean, var = conditional_moments(eta, np.broadcast_to(obs, eta.shape), r, rho)
    return mean + np.sqrt(var) * z


def predictive_cdf(p, mu, sigma2, u):
    """Zero-inflated lognormal CDF ``(1 - p) + p F_LN(u; mu, sigma2)``."""
    p = np.asarray(p, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ParameterError("thresholds must be nonnegative")
    if np.any((p < 0) | (p > 1)):
        raise ParameterError("occurrence probability must lie in [0, 1]")
    if np.any(~(sigma2 > 0)):
        raise ParameterError("log-variance must be positive")
    with np.errstate(divide="ignore"):
        z = (np.log(u) - mu) / np.sqrt(sigma2)
    f_ln = np.where(u > 0, ndtr(z), 0.0)
    out = (1 - p) + p * f_ln
    return out if out.ndim else float(out)


def cell_predictive_cdf(chain: Chain, surfaces: Surfaces, p, thresholds, variable: int, cells=None):
    """Posterior predictive CDF at stored cells for one variable (0 = BA, 1 = CNT).

    Per-draw zero-inflated lognormal CDFs are averaged over the chain.

    Parameters
    ----------
    p : ndarray, shape (N, T)
        Occurrence probabilities.
    thresholds : ndarray, shape (U,)
    cells : ndarray of int, optional
        Flat cell indices (``i * T + t``); defaults to all stored cells.

    Returns
    -------
    cells : ndarray of int
    cdf : ndarray, shape (n_cells, U)
    """
    T = chain.meta["T"]
    stored = np.asarray(chain.meta["predict_cells"], dtype=int)
    if cells is None:
        cells = stored
    cells = np.asarray(cells, dtype=int)
    lookup = {c: k for k, c in enumerate(stored.tolist())}
    try:
        pos = np.array([lookup[c] for c in cells.tolist()], dtype=int)
    except KeyError as exc:
        raise ParameterError(f"cell {exc.args[0]} was not stored during sampling") from None
    eta = chain["eta_pred"][:, pos, :]
    w_obs = np.asarray(chain.meta["w_obs"], dtype=float)[pos]
    w_obs = np.where(np.isinf(w_obs), np.nan, w_obs)
    r = chain["r"][:, None]
    rho = chain["rho"][:, None]
    if eta.shape[2] == 1:
        mean, var = eta[..., 0], np.broadcast_to(1 - r, eta.shape[:2])
    else:
        # the predicted variable is treated as unknown even if stored as observed
        w_cond = w_obs.copy()
        w_cond[:, variable] = np.nan
        m2, v2 = conditional_moments(eta, np.broadcast_to(w_cond, eta.shape), r, rho)
        mean, var = m2[..., variable], v2[..., variable]
    pix, per = np.divmod(cells, T)
    mu_s = surfaces.mean(variable)[pix]
    sd_s = surfaces.sd(variable)[pix]
    log_mean = mu_s[None, :] + sd_s[None, :] * mean
    log_sd = sd_s[None, :] * np.sqrt(np.maximum(var, 1e-300))
    u = np.asarray(thresholds, dtype=float)
    with np.errstate(divide="ignore"):
        logu = np.where(u > 0, np.log(np.where(u > 0, u, 1.0)), -np.inf)
    f_ln = ndtr((logu[None, None, :] - log_mean[..., None]) / log_sd[..., None]).mean(axis=0)
    f_ln[:, u == 0] = 0.0
    pp = np.asarray(p)[pix, per]
    cdf = (1 - pp)[:, None] + pp[:, None] * f_ln
    validate_cdf(cdf)
    return cells, cdf


def write_prediction_csv(path, obs_ids, variable, cdf) -> None:
    """Write ``obs_id, variable, threshold_index, cdf_value`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["obs_id", "variable", "threshold_index", "cdf_value"])
        for oid, row in zip(obs_ids, cdf):
            for j, v in enumerate(row):
                w.writerow([oid, variable, j, repr(float(v))])
