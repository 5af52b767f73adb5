"""Log-Gaussian Cox process for gridded fire counts.

    CNT_t(s_i) ~ Poisson(exp Lambda_t(s_i)),
    Lambda_t = X_t beta + A zeta_t + nu_t,
    zeta_t ~ N(0, s2 r Q(phi)^-1),   nu_t ~ N(0, s2 (1 - r) I).

Log-intensities of a random batch of periods take one Langevin step per
iteration; ``zeta``, ``beta`` and ``s2`` are Gibbs updates and ``phi``,
``r`` random-walk Metropolis on the logit scale.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.spatial.distance import pdist
from scipy.stats import poisson

from .exceptions import ParameterError
from .gmrf import SpdeOperator
from .mcmc import BoundedWalk, Chain, gaussian_logpdf_prec, run_sampler
from .mesh import TriMesh, assemble_fem, project

__all__ = [
    "LgcpConfig",
    "run_lgcp",
    "poisson_loglik",
    "poisson_grad",
    "log_intensity_grad",
    "zeta_conditional",
    "lgcp_predictive_cdf",
    "LOG_INTENSITY_CAP",
]

LOG_INTENSITY_CAP = 30.0


@dataclass
class LgcpConfig:
    """Sampler settings.

    The Langevin step at iteration ``k`` is ``step_a (1 + k / step_c)^-0.55``
    times a fixed per-cell preconditioner ``1 / (y + 1 + 1 / v)`` with
    ``v`` the nugget variance at the start. ``adjust`` adds a Metropolis
    correction to each cell's Langevin move.
    """

    iterations: int = 250_000
    burn_in: int = 200_000
    thin: int = 25
    batch: int = 10
    step_a: float = 0.5
    step_c: float = 1000.0
    adjust: bool = False
    beta_var: float = 100.0
    s2_shape: float = 0.1
    s2_rate: float = 0.1
    s_phi: float = 0.3
    s_r: float = 0.3
    adapt: bool = True
    checkpoint_every: int = 0
    fixed: dict = field(default_factory=dict)
    init: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.burn_in < self.iterations:
            raise ParameterError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.thin < 1 or self.batch < 1:
            raise ParameterError("thin and batch must be at least 1")
        if self.step_a < 0:
            raise ParameterError("step size must be nonnegative")


def poisson_loglik(lam, y, obs=None):
    """``sum y lam - exp(lam) - log y!`` over observed cells."""
    lam = np.asarray(lam, dtype=float)
    y = np.asarray(y, dtype=float)
    obs = np.ones(lam.shape, dtype=bool) if obs is None else np.asarray(obs, dtype=bool)
    from scipy.special import gammaln

    return float(np.sum(np.where(obs, y * lam - np.exp(lam) - gammaln(y + 1), 0.0)))


def poisson_grad(lam, y, obs=None):
    """Derivative of :func:`poisson_loglik` in each log-intensity: ``y - exp(lam)``."""
    lam = np.asarray(lam, dtype=float)
    g = np.asarray(y, dtype=float) - np.exp(lam)
    return g if obs is None else np.where(obs, g, 0.0)


def log_intensity_grad(lam, y, obs, mean, var):
    """Gradient of the log full conditional of independent log-intensities."""
    return poisson_grad(lam, y, obs) - (lam - mean) / var


def zeta_conditional(A, Q, resid, s2, r):
    """Precision and mean of ``zeta_t`` given ``Lambda_t - X_t beta = resid``."""
    A = sp.csr_matrix(A)
    M = (A.T @ A / (s2 * (1 - r)) + Q / (s2 * r)).tocsr()
    b = A.T @ resid / (s2 * (1 - r))
    return M, b


class LgcpSampler:
    def __init__(self, cnt, cnt_obs, design, mesh: TriMesh, config: LgcpConfig, rng,
                 locations=None, A=None, predict_cells=None):
        y = np.asarray(cnt, dtype=float)
        obs = np.asarray(cnt_obs, dtype=bool)
        self.N, self.T = y.shape
        if np.any(y[obs] < 0) or np.any(y[obs] != np.round(y[obs])):
            raise ParameterError("counts must be nonnegative integers")
        if config.batch > self.T:
            raise ParameterError("batch size exceeds the number of periods")
        self.y = np.where(obs, y, 0.0)
        self.obs = obs
        Xd = np.asarray(design, dtype=float)
        if Xd.ndim == 2:
            Xd = np.repeat(Xd[:, None, :], self.T, axis=1)
        if Xd.shape[:2] != (self.N, self.T):
            raise ParameterError("design must be N x p or N x T x p")
        self.Xf = Xd.reshape(self.N * self.T, -1)
        if np.linalg.matrix_rank(self.Xf) < self.Xf.shape[1]:
            raise ParameterError("design matrix is rank deficient")
        self.p = self.Xf.shape[1]
        self.config = config
        if A is None:
            if locations is None:
                raise ParameterError("pass locations or a projection matrix")
            A = project(mesh, locations)
        self.A = sp.csr_matrix(A)
        self.At = self.A.T.tocsr()
        self.AtA = (self.At @ self.A).tocsr()
        self.op = SpdeOperator(assemble_fem(mesh))
        self.m = self.op.n
        locs = locations if locations is not None else self.A @ mesh.nodes
        self.delta = float(pdist(np.asarray(locs)).max())
        self.walk_phi = BoundedWalk(0.0, 2.0 * self.delta, config.s_phi)
        self.walk_r = BoundedWalk(0.0, 1.0, config.s_r)
        self.fixed = dict(config.fixed)
        init = {**config.init, **self.fixed}
        pooled = self.y[obs].mean() if obs.any() else 1.0
        lam0 = np.log(np.where(obs, self.y, pooled) + 0.5)
        self.lam = np.asarray(init.get("lam", lam0), dtype=float).copy()
        beta0 = np.linalg.lstsq(self.Xf, self.lam.ravel(), rcond=None)[0]
        self.beta = np.asarray(init.get("beta", beta0), dtype=float).copy()
        self.s2 = float(init.get("s2", max(float(np.var(self.lam.ravel() - self.Xf @ self.beta)), 0.05)))
        self.phi = float(init.get("phi", self.delta / 10.0))
        self.r = float(init.get("r", 0.5))
        self.zeta = np.zeros((self.m, self.T))
        self.precond = 1.0 / (self.y + 1.0 + 1.0 / (self.s2 * (1 - self.r)))
        if predict_cells is None:
            predict_cells = ~obs
        self.pred_idx = np.flatnonzero(np.asarray(predict_cells).ravel())
        self.iteration = 0
        self.clamped = 0
        self.lam_accept = [0, 0]
        self._refresh_prior()
        self.chain = Chain(meta={"N": self.N, "T": self.T, "predict_cells": self.pred_idx.tolist()})

    def _refresh_prior(self):
        self.Q = self.op.precision(self.phi).Q
        self.logdetQ = self.op.factor(self.Q).logdet()
        self.quadQ = float(np.sum(self.zeta * (self.Q @ self.zeta)))

    def _mean(self):
        return (self.Xf @ self.beta).reshape(self.N, self.T) + self.A @ self.zeta

    def step_size(self):
        c = self.config
        return c.step_a * (1.0 + self.iteration / c.step_c) ** -0.55

    def step(self, rng, adapt=False):
        self._update_lambda(rng)
        self._update_zeta(rng)
        if "beta" not in self.fixed:
            self._update_beta(rng)
        if "s2" not in self.fixed:
            self._update_s2(rng)
        adapt = adapt and self.config.adapt
        if "phi" not in self.fixed:
            self._update_phi(rng, adapt)
        if "r" not in self.fixed:
            self._update_r(rng, adapt)
        self.iteration += 1

    def _update_lambda(self, rng):
        b = self.config.batch
        cols = np.sort(rng.choice(self.T, size=b, replace=False)) if b < self.T else np.arange(self.T)
        h = self.step_size() * self.precond[:, cols]
        z = rng.standard_normal(h.shape)
        if self.config.step_a == 0:
            return
        lam = self.lam[:, cols]
        mean = self._mean()[:, cols]
        v = self.s2 * (1 - self.r)
        y, obs = self.y[:, cols], self.obs[:, cols]
        g = log_intensity_grad(lam, y, obs, mean, v)
        prop = lam + 0.5 * h * g + np.sqrt(h) * z
        over = prop > LOG_INTENSITY_CAP
        if over.any():
            self.clamped += int(over.sum())
            prop = np.minimum(prop, LOG_INTENSITY_CAP)
        if self.config.adjust:
            u = rng.random(h.shape)
            gp = log_intensity_grad(prop, y, obs, mean, v)

            def logp(x):
                return np.where(obs, y * x - np.exp(x), 0.0) - 0.5 * (x - mean) ** 2 / v

            fwd = -0.5 * (prop - lam - 0.5 * h * g) ** 2 / h
            bwd = -0.5 * (lam - prop - 0.5 * h * gp) ** 2 / h
            acc = np.log(u) < logp(prop) - logp(lam) + bwd - fwd
            self.lam_accept[0] += int(acc.sum())
            self.lam_accept[1] += acc.size
            prop = np.where(acc, prop, lam)
        self.lam[:, cols] = prop

    def _update_zeta(self, rng):
        resid = self.lam - (self.Xf @ self.beta).reshape(self.N, self.T)
        M, rhs = zeta_conditional(self.A, self.Q, resid, self.s2, self.r)
        fac = self.op.factor(M)
        self.zeta = fac.solve(rhs) + fac.solve_upper(rng.standard_normal((self.m, self.T)))
        self.quadQ = float(np.sum(self.zeta * (self.Q @ self.zeta)))

    def _update_beta(self, rng):
        v = self.s2 * (1 - self.r)
        resid = (self.lam - self.A @ self.zeta).ravel()
        P = self.Xf.T @ self.Xf / v + np.eye(self.p) / self.config.beta_var
        U = sla.cholesky(P, lower=False)
        mean = sla.cho_solve((U, False), self.Xf.T @ resid / v)
        self.beta = mean + sla.solve_triangular(U, rng.standard_normal(self.p), lower=False)

    def _update_s2(self, rng):
        e = self.lam - self._mean()
        ss = float(np.sum(e * e)) / (1 - self.r) + self.quadQ / self.r
        shape = self.config.s2_shape + 0.5 * (self.N * self.T + self.m * self.T)
        rate = self.config.s2_rate + 0.5 * ss
        self.s2 = 1.0 / rng.gamma(shape, 1.0 / rate)

    def _update_phi(self, rng, adapt):
        cand = self.walk_phi.propose(self.phi, rng)
        Qc = self.op.precision(cand).Q
        logdet_c = self.op.factor(Qc).logdet()
        quad_c = float(np.sum(self.zeta * (Qc @ self.zeta)))
        sr = self.s2 * self.r
        lr = (gaussian_logpdf_prec(self.zeta, logdet_c, quad_c, sr)
              - gaussian_logpdf_prec(self.zeta, self.logdetQ, self.quadQ, sr)
              + self.walk_phi.log_jacobian(cand) - self.walk_phi.log_jacobian(self.phi))
        if self.walk_phi.accept(lr, rng, adapt):
            self.phi, self.Q, self.logdetQ, self.quadQ = cand, Qc, logdet_c, quad_c

    def _update_r(self, rng, adapt):
        cand = self.walk_r.propose(self.r, rng)
        e = self.lam - self._mean()
        ss = float(np.sum(e * e))
        n = e.size

        def target(r):
            return (-0.5 * n * math.log(2 * math.pi * self.s2 * (1 - r)) - 0.5 * ss / (self.s2 * (1 - r))
                    + gaussian_logpdf_prec(self.zeta, self.logdetQ, self.quadQ, self.s2 * r))

        lr = target(cand) - target(self.r) + self.walk_r.log_jacobian(cand) - self.walk_r.log_jacobian(self.r)
        if self.walk_r.accept(lr, rng, adapt):
            self.r = cand

    def finite(self):
        return bool(np.isfinite(self.lam).all() and np.isfinite(self.zeta).all() and math.isfinite(self.s2))

    def record(self):
        draw = dict(phi=self.phi, r=self.r, s2=self.s2, beta=self.beta,
                    mean_rate=float(np.mean(np.exp(self.lam))))
        if self.pred_idx.size:
            draw["lam_pred"] = self.lam.ravel()[self.pred_idx]
        self.chain.append(**draw)

    def finish(self):
        if self.clamped:
            warnings.warn(f"log-intensity clamped at {LOG_INTENSITY_CAP} in {self.clamped} cell updates",
                          stacklevel=3)
        self.chain.meta.update(
            accept_phi=self.walk_phi.rate, accept_r=self.walk_r.rate, clamped=self.clamped,
            accept_lambda=self.lam_accept[0] / self.lam_accept[1] if self.lam_accept[1] else float("nan"),
        )
        return self.chain

    def checkpoint(self):
        return {
            "lam": self.lam.ravel().tolist(), "beta": self.beta.tolist(), "s2": self.s2,
            "phi": self.phi, "r": self.r, "zeta": self.zeta.ravel().tolist(),
            "iteration": self.iteration, "clamped": self.clamped, "lam_accept": self.lam_accept,
            "walks": [self.walk_phi.state(), self.walk_r.state()], "chain": self.chain.to_json(),
        }

    def restore(self, s):
        self.lam = np.asarray(s["lam"], dtype=float).reshape(self.N, self.T)
        self.beta = np.asarray(s["beta"], dtype=float)
        self.s2, self.phi, self.r = float(s["s2"]), float(s["phi"]), float(s["r"])
        self.zeta = np.asarray(s["zeta"], dtype=float).reshape(self.m, self.T)
        self.iteration, self.clamped = int(s["iteration"]), int(s["clamped"])
        self.lam_accept = list(s["lam_accept"])
        self.walk_phi.load(s["walks"][0])
        self.walk_r.load(s["walks"][1])
        self.chain = Chain.from_json(s["chain"])
        self._refresh_prior()


def run_lgcp(cnt, cnt_obs, design, mesh: TriMesh, config: LgcpConfig | None = None, rng=None, *,
             locations=None, A=None, predict_cells=None, checkpoint_path=None, resume=False,
             stop=None) -> Chain:
    """Sample the LGCP for an N x T count panel.

    Parameters
    ----------
    cnt, cnt_obs : ndarray, shape (N, T)
        Counts and their observation mask; unobserved cells carry no
        likelihood.
    design : ndarray, shape (N, p) or (N, T, p)
    mesh : TriMesh
    config : LgcpConfig
    rng : numpy.random.Generator
    locations : ndarray, shape (N, 2), optional
        Pixel locations; required unless ``A`` is given.

    Returns
    -------
    Chain
        Scalars ``phi``, ``r``, ``s2``, ``mean_rate``; vectors ``beta``
        and ``lam_pred`` (log-intensities at the prediction cells).
    """
    config = config or LgcpConfig()
    if rng is None:
        rng = np.random.default_rng()
    sampler = LgcpSampler(cnt, cnt_obs, design, mesh, config, rng, locations, A, predict_cells)
    run_sampler(sampler, config, rng, checkpoint_path=checkpoint_path, resume=resume, stop=stop)
    return sampler.finish()


def lgcp_predictive_cdf(chain_or_lam, u, cells=None) -> np.ndarray:
    """Mean over draws of the Poisson CDF at thresholds ``u``.

    Accepts a chain (using the stored prediction cells, optionally a
    subset given by position) or an array of log-intensity draws of shape
    (n_draws, n_cells).
    """
    lam = chain_or_lam["lam_pred"] if isinstance(chain_or_lam, Chain) else np.asarray(chain_or_lam, dtype=float)
    lam = np.atleast_2d(lam)
    if cells is not None:
        lam = lam[:, np.asarray(cells, dtype=int)]
    u = np.asarray(u, dtype=float)
    rate = np.exp(np.minimum(lam, LOG_INTENSITY_CAP))
    return poisson.cdf(u[None, None, :], rate[..., None]).mean(axis=0)
