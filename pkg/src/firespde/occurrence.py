"""Latent-probit spatial model for the fire occurrence indicator.

For pixel ``i`` and period ``t``

    Z_t(s_i) = 1{X_t(s_i) > 0},
    X_t = mu + A eps_t + e_t,    eps_t ~ N(0, r Q(phi)^-1),  e_t ~ N(0, (1 - r) I),
    mu ~ N(D theta, tau^-1 I),

so the spatial weights ``eps_t`` carry the ``sqrt(r)`` factor. Sampling is
Gibbs for ``mu``, ``theta``, ``tau``, ``eps`` and ``X`` and logit-scale
random-walk Metropolis for ``phi`` and ``r``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.spatial.distance import pdist
from scipy.special import ndtr, ndtri

from .exceptions import ParameterError
from .gmrf import SpdeOperator
from .mcmc import BoundedWalk, Chain, gaussian_logpdf_prec, run_sampler, sample_signed_normal
from .mesh import TriMesh, assemble_fem, project
from .panel import IndicatorPanel

__all__ = [
    "Stage1Config",
    "run_stage1",
    "run_stage1_cov",
    "predict_occurrence_prob",
    "predict_cell_prob",
    "log_ratio_range",
    "log_ratio_ratio",
    "tau_conditional",
]


@dataclass
class Stage1Config:
    """MCMC settings and priors for the occurrence model.

    ``fixed`` holds parameters kept at a given value instead of sampled
    (any of ``phi``, ``r``, ``theta``, ``tau``, ``gamma``); ``init``
    overrides the default starting values.
    """

    iterations: int = 60_000
    burn_in: int = 10_000
    thin: int = 5
    s_phi: float = 0.3
    s_r: float = 0.3
    adapt: bool = True
    theta_sd: float = 10.0
    gamma_sd: float = 10.0
    tau_shape: float = 0.1
    tau_rate: float = 0.1
    checkpoint_every: int = 0
    keep_latent: bool = False
    fixed: dict = field(default_factory=dict)
    init: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.burn_in < self.iterations:
            raise ParameterError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ParameterError("thin must be at least 1")


def tau_conditional(mu, D, theta, shape=0.1, rate=0.1):
    """Shape and rate of the Gamma full conditional of ``tau``."""
    resid = np.asarray(mu) - np.asarray(D) @ np.asarray(theta)
    return shape + 0.5 * resid.size, rate + 0.5 * float(resid @ resid)


def log_ratio_range(eps, quad_cur, logdet_cur, quad_cand, logdet_cand, r, phi_cur, phi_cand, delta):
    """Log acceptance ratio for a range proposal on the logit scale of ``(0, 2 delta)``.

    ``quad_*`` are ``sum_t eps_t' Q(phi) eps_t`` and ``logdet_*`` are
    ``log|Q(phi)|`` at the current and candidate ranges.
    """
    hi = 2.0 * delta
    return (
        gaussian_logpdf_prec(eps, logdet_cand, quad_cand, r)
        - gaussian_logpdf_prec(eps, logdet_cur, quad_cur, r)
        + math.log(phi_cand * (hi - phi_cand))
        - math.log(phi_cur * (hi - phi_cur))
    )


def log_ratio_ratio(resid_ss, n_cells, eps, quad, logdet, r_cur, r_cand):
    """Log acceptance ratio for a spatial-ratio proposal on the logit scale.

    ``resid_ss`` is ``||X - mu - A eps||^2`` over ``n_cells`` latent cells;
    ``quad`` and ``logdet`` refer to ``Q(phi)`` at the current range.
    """

    def x_loglik(r):
        return -0.5 * n_cells * math.log(2 * math.pi * (1 - r)) - 0.5 * resid_ss / (1 - r)

    return (
        x_loglik(r_cand) - x_loglik(r_cur)
        + gaussian_logpdf_prec(eps, logdet, quad, r_cand)
        - gaussian_logpdf_prec(eps, logdet, quad, r_cur)
        + math.log(r_cand * (1 - r_cand))
        - math.log(r_cur * (1 - r_cur))
    )


def _check_rank(M, what):
    M = np.asarray(M, dtype=float)
    if M.shape[1] and np.linalg.matrix_rank(M) < M.shape[1]:
        raise ParameterError(f"{what} is rank deficient")


class OccurrenceSampler:
    """One Markov chain for the occurrence model; state lives on the instance."""

    def __init__(self, indicator: IndicatorPanel, D, mesh: TriMesh, config: Stage1Config,
                 rng, covariates=None, predict_cells=None, A=None):
        z, obs = np.asarray(indicator.z), np.asarray(indicator.observed, dtype=bool)
        if not obs.any():
            raise ParameterError("indicator has no observed cells")
        self.N, self.T = z.shape
        D = np.asarray(D, dtype=float)
        if D.ndim != 2 or D.shape[0] != self.N:
            raise ParameterError(f"design matrix must have {self.N} rows")
        _check_rank(D, "design matrix")
        self.D = D
        self.config = config
        self.sign = np.where(obs, 2 * z.astype(int) - 1, 0)
        if A is None:
            if indicator.locations is None:
                raise ParameterError("indicator carries no locations; pass A")
            A = project(mesh, indicator.locations)
        self.A = sp.csr_matrix(A)
        self.At = self.A.T.tocsr()
        self.AtA = (self.At @ self.A).tocsr()
        self.op = SpdeOperator(assemble_fem(mesh))
        self.m = self.op.n
        locs = indicator.locations if indicator.locations is not None else (self.A @ mesh.nodes)
        self.delta = float(pdist(np.asarray(locs)).max()) if self.N > 1 else float(np.ptp(mesh.nodes, axis=0).max())
        self.DtD = D.T @ D
        if covariates is not None:
            cov = np.asarray(covariates, dtype=float)
            if cov.shape[:2] != (self.N, self.T):
                raise ParameterError(f"covariates must be {self.N} x {self.T} x L")
            self.cov_flat = cov.reshape(self.N * self.T, -1)
            _check_rank(self.cov_flat, "covariate array")
            self.L = self.cov_flat.shape[1]
        else:
            self.cov_flat, self.L = None, 0
        if predict_cells is None:
            predict_cells = ~obs
        self.pred_idx = np.flatnonzero(np.asarray(predict_cells).ravel())
        self.fixed = dict(config.fixed)
        self.walk_phi = BoundedWalk(0.0, 2.0 * self.delta, config.s_phi)
        self.walk_r = BoundedWalk(0.0, 1.0, config.s_r)
        self.chain = Chain(meta={"N": self.N, "T": self.T, "delta": self.delta,
                                 "predict_cells": self.pred_idx.tolist()})
        self.sign_violations = 0
        self._initialize(obs, z, rng)

    # ------------------------------------------------------------------ state
    def _initialize(self, obs, z, rng):
        cfg, init = self.config, {**self.config.init, **self.fixed}
        n_obs = obs.sum(axis=1)
        freq = np.where(n_obs > 0, (z * obs).sum(axis=1) / np.maximum(n_obs, 1), 0.5)
        mu0 = np.clip(ndtri(np.clip(freq, 1e-6, 1 - 1e-6)), -3.0, 3.0)
        self.mu = np.asarray(init.get("mu", mu0), dtype=float).copy()
        theta0 = np.linalg.lstsq(self.D, self.mu, rcond=None)[0]
        self.theta = np.asarray(init.get("theta", theta0), dtype=float).copy()
        resid = self.mu - self.D @ self.theta
        self.tau = float(init.get("tau", 1.0 / max(resid.var(), 0.1)))
        self.gamma = np.asarray(init.get("gamma", np.zeros(self.L)), dtype=float).copy()
        self.phi = float(init.get("phi", self.delta / 10.0))
        self.r = float(init.get("r", 0.5))
        self.eps = np.asarray(init.get("eps", np.zeros((self.m, self.T))), dtype=float).copy()
        self._refresh_prior()
        self.X = sample_signed_normal(self._x_mean(), math.sqrt(1 - self.r), self.sign, rng)
        if cfg.s_phi <= 0 or cfg.s_r <= 0:
            raise ParameterError("proposal SDs must be positive")

    def _refresh_prior(self):
        self.Q = self.op.precision(self.phi).Q
        self.Qfac = self.op.factor(self.Q)
        self.logdetQ = self.Qfac.logdet()
        self.quadQ = float(np.sum(self.eps * (self.Q @ self.eps)))

    def _offset(self):
        if self.L == 0:
            return 0.0
        return (self.cov_flat @ self.gamma).reshape(self.N, self.T)

    def _x_mean(self):
        return self.mu[:, None] + self._offset() + self.A @ self.eps

    # ------------------------------------------------------------ updates
    def step(self, rng, adapt=False):
        self._update_mu(rng)
        if self.L and "gamma" not in self.fixed:
            self._update_gamma(rng)
        if "theta" not in self.fixed:
            self._update_theta(rng)
        if "tau" not in self.fixed:
            self._update_tau(rng)
        self._update_eps(rng)
        if "phi" not in self.fixed:
            self._update_phi(rng, adapt and self.config.adapt)
        if "r" not in self.fixed:
            self._update_r(rng, adapt and self.config.adapt)
        self._update_x(rng)

    def _update_mu(self, rng):
        v = 1.0 - self.r
        prec = self.T / v + self.tau
        resid = self.X - self._offset() - self.A @ self.eps
        mean = (resid.sum(axis=1) / v + self.tau * (self.D @ self.theta)) / prec
        self.mu = mean + rng.standard_normal(self.N) / math.sqrt(prec)

    def _update_gamma(self, rng):
        v = 1.0 - self.r
        y = (self.X - self.mu[:, None] - self.A @ self.eps).ravel()
        P = self.cov_flat.T @ self.cov_flat / v + np.eye(self.L) / self.config.gamma_sd ** 2
        self.gamma = _gaussian_from_precision(P, self.cov_flat.T @ y / v, rng)

    def _update_theta(self, rng):
        P = self.tau * self.DtD + np.eye(self.D.shape[1]) / self.config.theta_sd ** 2
        self.theta = _gaussian_from_precision(P, self.tau * (self.D.T @ self.mu), rng)

    def _update_tau(self, rng):
        shape, rate = tau_conditional(self.mu, self.D, self.theta, self.config.tau_shape, self.config.tau_rate)
        self.tau = float(rng.gamma(shape, 1.0 / rate))

    def _update_eps(self, rng):
        v = 1.0 - self.r
        M = (self.AtA / v + self.Q / self.r).tocsr()
        fac = self.op.factor(M)
        rhs = self.At @ (self.X - self.mu[:, None] - self._offset()) / v
        self.eps = fac.solve(rhs) + fac.solve_upper(rng.standard_normal((self.m, self.T)))
        self.quadQ = float(np.sum(self.eps * (self.Q @ self.eps)))

    def _update_phi(self, rng, adapt):
        cand = self.walk_phi.propose(self.phi, rng)
        Qc = self.op.precision(cand).Q
        fac = self.op.factor(Qc)
        logdet_c = fac.logdet()
        quad_c = float(np.sum(self.eps * (Qc @ self.eps)))
        lr = log_ratio_range(self.eps, self.quadQ, self.logdetQ, quad_c, logdet_c,
                             self.r, self.phi, cand, self.delta)
        if self.walk_phi.accept(lr, rng, adapt):
            self.phi, self.Q, self.Qfac, self.logdetQ, self.quadQ = cand, Qc, fac, logdet_c, quad_c

    def _update_r(self, rng, adapt):
        cand = self.walk_r.propose(self.r, rng)
        resid = self.X - self._x_mean()
        lr = log_ratio_ratio(float(np.sum(resid * resid)), resid.size, self.eps,
                             self.quadQ, self.logdetQ, self.r, cand)
        if self.walk_r.accept(lr, rng, adapt):
            self.r = cand

    def _update_x(self, rng):
        self.X = sample_signed_normal(self._x_mean(), math.sqrt(1 - self.r), self.sign, rng)
        self.sign_violations += int(np.count_nonzero(self.sign * self.X < 0))

    # ---------------------------------------------------------- recording
    def finite(self):
        return (np.isfinite(self.X).all() and np.isfinite(self.eps).all()
                and np.isfinite(self.mu).all() and math.isfinite(self.tau) and self.tau > 0)

    def record(self):
        draw = dict(phi=self.phi, r=self.r, tau=self.tau, mu=self.mu, theta=self.theta)
        if self.L:
            draw["gamma"] = self.gamma
        if self.pred_idx.size:
            mean = self._x_mean().ravel()[self.pred_idx]
            draw["cell_prob"] = ndtr(mean / math.sqrt(1 - self.r))
        if self.config.keep_latent:
            draw["X"] = self.X
            draw["eps"] = self.eps
        self.chain.append(**draw)

    def finish(self):
        self.chain.meta.update(
            accept_phi=self.walk_phi.rate, accept_r=self.walk_r.rate,
            s_phi=self.walk_phi.sd, s_r=self.walk_r.sd,
            sign_violations=self.sign_violations,
        )
        return self.chain

    def checkpoint(self):
        return {
            "mu": self.mu.tolist(), "theta": self.theta.tolist(), "tau": self.tau,
            "gamma": self.gamma.tolist(), "phi": self.phi, "r": self.r,
            "eps": self.eps.tolist(), "X": self.X.tolist(),
            "walk_phi": self.walk_phi.state(), "walk_r": self.walk_r.state(),
            "sign_violations": self.sign_violations, "chain": self.chain.to_json(),
        }

    def restore(self, s):
        self.mu = np.asarray(s["mu"], dtype=float)
        self.theta = np.asarray(s["theta"], dtype=float)
        self.tau = float(s["tau"])
        self.gamma = np.asarray(s["gamma"], dtype=float)
        self.phi, self.r = float(s["phi"]), float(s["r"])
        self.eps = np.asarray(s["eps"], dtype=float).reshape(self.m, self.T)
        self.X = np.asarray(s["X"], dtype=float).reshape(self.N, self.T)
        self.walk_phi.load(s["walk_phi"])
        self.walk_r.load(s["walk_r"])
        self.sign_violations = int(s["sign_violations"])
        self.chain = Chain.from_json(s["chain"])
        self._refresh_prior()


def _gaussian_from_precision(P, b, rng):
    """Draw from ``N(P^-1 b, P^-1)`` for a small dense ``P``."""
    U = sla.cholesky(P, lower=False)
    mean = sla.cho_solve((U, False), b)
    return mean + sla.solve_triangular(U, rng.standard_normal(len(b)), lower=False)


def run_stage1(indicator: IndicatorPanel, D, mesh: TriMesh, config: Stage1Config | None = None, rng=None,
               *, predict_cells=None, A=None, checkpoint_path=None, resume=False, stop=None) -> Chain:
    """Sample the occurrence model and return thinned post-burn-in draws.

    Parameters
    ----------
    indicator : IndicatorPanel
        N x T indicator with observation mask and pixel locations.
    D : ndarray, shape (N, P)
        Full-rank design matrix for the prior mean of ``mu``.
    mesh : TriMesh
        Mesh covering every pixel location.
    config : Stage1Config
    rng : numpy.random.Generator
    predict_cells : ndarray of bool, optional
        Cells whose conditional occurrence probability is stored per draw;
        defaults to all unobserved cells.

    Returns
    -------
    Chain
        Scalars ``phi``, ``r``, ``tau``; vectors ``mu``, ``theta`` and
        ``cell_prob``. ``meta`` holds acceptance rates and the count of
        sign violations of ``X`` (always zero for a correct sampler).
    """
    return _run(indicator, D, mesh, config, rng, None, predict_cells, A, checkpoint_path, resume, stop)


def run_stage1_cov(indicator: IndicatorPanel, D_full, mesh: TriMesh, config: Stage1Config | None = None,
                   rng=None, *, D=None, predict_cells=None, A=None, checkpoint_path=None, resume=False,
                   stop=None) -> Chain:
    """Occurrence model with a spatially varying intercept plus ``sum_l gamma_l D_l,t``.

    ``D_full`` is N x T x L. ``D`` is the design for the intercept field
    and defaults to a column of ones. With ``L == 0`` this is
    :func:`run_stage1`.
    """
    D_full = np.asarray(D_full, dtype=float)
    N = indicator.z.shape[0]
    if D is None:
        D = np.ones((N, 1))
    if D_full.ndim != 3:
        raise ParameterError("D_full must be N x T x L")
    if D_full.shape[2] == 0:
        return run_stage1(indicator, D, mesh, config, rng, predict_cells=predict_cells, A=A,
                          checkpoint_path=checkpoint_path, resume=resume, stop=stop)
    return _run(indicator, D, mesh, config, rng, D_full, predict_cells, A, checkpoint_path, resume, stop)


def _run(indicator, D, mesh, config, rng, covariates, predict_cells, A, checkpoint_path, resume, stop):
    config = config or Stage1Config()
    if rng is None:
        rng = np.random.default_rng()
    sampler = OccurrenceSampler(indicator, D, mesh, config, rng, covariates, predict_cells, A)
    run_sampler(sampler, config, rng, checkpoint_path=checkpoint_path, resume=resume, stop=stop)
    return sampler.finish()


def predict_occurrence_prob(chain: Chain):
    """Per-draw ``Phi(mu)`` and its posterior mean.

    Returns
    -------
    mean : ndarray, shape (N,)
    draws : ndarray, shape (n_draws, N)
    """
    mu = chain["mu"]
    if mu.size == 0:
        raise ParameterError("chain has no draws")
    draws = ndtr(mu)
    return draws.mean(axis=0), draws


def predict_cell_prob(chain: Chain) -> np.ndarray:
    """N x T posterior mean occurrence probability.

    Cells stored during sampling use the conditional probability given the
    spatial weights of their period; other cells use ``Phi(mu)``.
    """
    N, T = chain.meta["N"], chain.meta["T"]
    out = np.repeat(predict_occurrence_prob(chain)[0][:, None], T, axis=1)
    idx = np.asarray(chain.meta.get("predict_cells", []), dtype=int)
    if idx.size and "cell_prob" in chain:
        out.ravel()[idx] = chain["cell_prob"].mean(axis=0)
    return out
