"""Synthetic panels drawn from the full two-part generative model.

Occurrence follows the latent probit with an SPDE spatial effect; where a
fire occurs, log burnt area and log count are a bivariate separable field
mapped through smooth mean and SD surfaces.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ParameterError
from .gmrf import SpdeOperator, sample_gmrf
from .mesh import MeshConfig, TriMesh, assemble_fem, build_mesh, project
from .panel import ObservationPanel, default_period_labels

__all__ = ["SimConfig", "SimTruth", "grid_locations", "synthetic_design", "simulate", "write_truth_csv"]


@dataclass
class SimConfig:
    """Grid, truth parameters and missingness for :func:`simulate`.

    Missingness is injected completely at random: ``p_both`` of cells lose
    both variables, then ``p_ba`` and ``p_cnt`` of the remaining cells lose
    one of them. Only a ``missing_period_frac`` share of periods, chosen at
    random, receives missingness, so complete periods remain for masking.
    """

    nx: int = 20
    ny: int = 20
    T: int = 20
    spacing: float = 1.0
    theta_mu: tuple = (-0.2, 0.0, 0.0, 0.3, -0.2, 0.2)
    tau_mu: float = 25.0
    mu_z_const: float | None = None
    phi_eps: float = 3.0
    r_eps: float = 0.8
    phi_eta: float = 3.0
    r_eta: float = 0.8
    rho_eta: float = 0.6
    mu1: tuple = (2.0, 0.6)
    sigma1: tuple = (1.2, 0.2)
    mu2: tuple = (0.8, 0.3)
    sigma2: tuple = (0.7, 0.1)
    p_both: float = 0.0
    p_ba: float = 0.0
    p_cnt: float = 0.0
    missing_period_frac: float = 1.0
    mesh: MeshConfig = field(default_factory=MeshConfig)
    seed: int | None = None

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or self.T < 1 or self.nx * self.ny < 3:
            raise ParameterError("grid needs at least three pixels and one period")
        for name in ("phi_eps", "phi_eta", "tau_mu", "spacing"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        for name in ("r_eps", "r_eta", "p_both", "p_ba", "p_cnt", "missing_period_frac"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1]")
        if not -1.0 < self.rho_eta < 1.0:
            raise ParameterError("rho_eta must lie in (-1, 1)")
        if self.sigma1[0] - abs(self.sigma1[1]) <= 0 or self.sigma2[0] - abs(self.sigma2[1]) <= 0:
            raise ParameterError("SD surfaces must stay positive")


@dataclass
class SimTruth:
    locations: np.ndarray
    mesh: TriMesh
    A: object
    D: np.ndarray
    mu_z: np.ndarray
    X: np.ndarray
    z: np.ndarray
    W: np.ndarray
    surfaces: dict
    scalars: dict
    log_ba: np.ndarray
    log_cnt: np.ndarray


def grid_locations(nx, ny, spacing=1.0):
    """Pixel centres of an ``nx`` by ``ny`` grid, x varying fastest."""
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing)
    return np.column_stack([xs.ravel(), ys.ravel()])


def synthetic_design(locations):
    """N x 6 stand-in design: intercept, lon, lat and three smooth terrain-like columns."""
    loc = np.asarray(locations, dtype=float)
    span = np.ptp(loc, axis=0)
    span[span == 0] = 1.0
    u = (loc - loc.min(axis=0)) / span
    alt = np.sin(math.pi * u[:, 0]) * np.cos(0.5 * math.pi * u[:, 1])
    alt_sd = np.cos(1.3 * math.pi * u[:, 0] + 0.4) * u[:, 1]
    mainland = 1.0 / (1.0 + np.exp(-6.0 * (u[:, 0] + u[:, 1] - 0.9)))
    cols = np.column_stack([loc[:, 0], loc[:, 1], alt, alt_sd, mainland])
    sd = cols.std(axis=0)
    sd[sd == 0] = 1.0
    return np.column_stack([np.ones(len(loc)), (cols - cols.mean(axis=0)) / sd])


def _surface(u, mean, amp, phase):
    return mean + amp * np.sin(2 * math.pi * (u[:, 0] + phase)) * np.cos(math.pi * (u[:, 1] - phase))


def simulate(config: SimConfig, rng=None):
    """Draw an observation panel and the latent truth behind it.

    Returns
    -------
    panel : ObservationPanel
    truth : SimTruth
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    loc = grid_locations(config.nx, config.ny, config.spacing)
    N, T = len(loc), config.T
    mesh = build_mesh(loc, config.mesh)
    A = project(mesh, loc)
    op = SpdeOperator(assemble_fem(mesh))
    D = synthetic_design(loc)

    if config.mu_z_const is not None:
        mu_z = np.full(N, float(config.mu_z_const))
    else:
        mu_z = D @ np.asarray(config.theta_mu) + rng.standard_normal(N) / math.sqrt(config.tau_mu)

    # occurrence latent field
    eps_star = sample_gmrf(op.precision(config.phi_eps).Q, rng, size=T)
    X = (mu_z[:, None] + math.sqrt(config.r_eps) * (A @ eps_star)
         + math.sqrt(1 - config.r_eps) * rng.standard_normal((N, T)))
    z = X > 0

    # bivariate standardized field with separable covariance
    Qeta = op.precision(config.phi_eta).Q
    rho = config.rho_eta
    R_chol = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
    W = np.empty((N, T, 2))
    ind = sample_gmrf(Qeta, rng, size=2 * T).reshape(-1, 2, T)
    nug = rng.standard_normal((N, 2, T))
    for t in range(T):
        spatial = (A @ ind[:, :, t]) @ R_chol.T
        W[:, t, :] = math.sqrt(config.r_eta) * spatial + math.sqrt(1 - config.r_eta) * (nug[:, :, t] @ R_chol.T)

    span = np.ptp(loc, axis=0)
    span[span == 0] = 1.0
    u = (loc - loc.min(axis=0)) / span
    surfaces = {
        "mu1": _surface(u, *config.mu1, 0.0),
        "sigma1": _surface(u, *config.sigma1, 0.25),
        "mu2": _surface(u, *config.mu2, 0.1),
        "sigma2": _surface(u, *config.sigma2, 0.35),
    }
    log_ba = surfaces["mu1"][:, None] + surfaces["sigma1"][:, None] * W[:, :, 0]
    log_cnt = surfaces["mu2"][:, None] + surfaces["sigma2"][:, None] * W[:, :, 1]
    ba = np.where(z, np.exp(log_ba), 0.0)
    cnt = np.where(z, np.maximum(1, np.rint(np.exp(log_cnt))), 0).astype(np.int64)

    both = rng.random((N, T)) < config.p_both
    ba_miss = both | (~both & (rng.random((N, T)) < config.p_ba))
    cnt_miss = both | (~both & ~ba_miss & (rng.random((N, T)) < config.p_cnt))
    if config.missing_period_frac < 1.0:
        n_inc = int(round(config.missing_period_frac * T))
        hit = np.zeros(T, dtype=bool)
        hit[rng.choice(T, size=n_inc, replace=False)] = True
        ba_miss &= hit[None, :]
        cnt_miss &= hit[None, :]
    panel = ObservationPanel(
        locations=loc, ba=ba, ba_obs=~ba_miss, cnt=cnt, cnt_obs=~cnt_miss,
        period_labels=tuple(default_period_labels(T)),
    )
    truth = SimTruth(
        locations=loc, mesh=mesh, A=A, D=D, mu_z=mu_z, X=X, z=z.astype(np.int8), W=W,
        surfaces=surfaces,
        scalars={"phi_eps": config.phi_eps, "r_eps": config.r_eps, "phi_eta": config.phi_eta,
                 "r_eta": config.r_eta, "rho_eta": config.rho_eta, "tau_mu": config.tau_mu},
        log_ba=log_ba, log_cnt=log_cnt,
    )
    return panel, truth


def write_truth_csv(truth: SimTruth, path) -> None:
    """Long-format truth: ``kind,name,pixel,period,value`` (blank indices for scalars)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "name", "pixel", "period", "value"])
        for k, v in truth.scalars.items():
            w.writerow(["scalar", k, "", "", repr(float(v))])
        fields = {"mu_z": truth.mu_z, **truth.surfaces}
        for k, v in fields.items():
            for i, x in enumerate(v):
                w.writerow(["pixel", k, i, "", repr(float(x))])
        cells = {"X": truth.X, "z": truth.z, "W1": truth.W[:, :, 0], "W2": truth.W[:, :, 1]}
        for k, v in cells.items():
            for (i, t), x in np.ndenumerate(v):
                w.writerow(["cell", k, i, t, repr(float(x))])
