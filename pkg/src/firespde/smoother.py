"""Per-pixel moments of log-positive values and their low-rank spatial smoothing.

The smoother is the linear mixed model

    y_i = b0 + b1 lon_i + b2 lat_i + sum_r phi_r(s_i)' w_r + nu_i,
    w_r ~ N(0, tau_r^2 I),   nu_i ~ N(0, sigma^2),

with three resolutions of Gaussian kernels. Variance components are
found by EM and the weights by their conditional mean.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .exceptions import ParameterError
from .panel import ObservationPanel

__all__ = [
    "EmpiricalMoments",
    "BasisSet",
    "SmootherModel",
    "Surfaces",
    "StandardizedPanel",
    "empirical_moments",
    "make_basis",
    "fit_smoother",
    "predict_surface",
    "fit_surfaces",
    "standardize",
    "destandardize",
    "write_surfaces_csv",
    "read_surfaces_csv",
]

MAX_EM_STEPS = 500
EM_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class EmpiricalMoments:
    """Arrays of shape (N, 2); column 0 is BA and column 1 is CNT."""

    mean: np.ndarray
    sd: np.ndarray
    count: np.ndarray


def empirical_moments(panel: ObservationPanel) -> EmpiricalMoments:
    """Mean and SD of the natural log of strictly positive observed values.

    The mean is missing (NaN) without positive values and the SD is
    missing with fewer than two.
    """
    mean = np.full((panel.N, 2), np.nan)
    sd = np.full((panel.N, 2), np.nan)
    count = np.zeros((panel.N, 2), dtype=int)
    for p, (vals, obs) in enumerate(((panel.ba, panel.ba_obs), (panel.cnt, panel.cnt_obs))):
        pos = obs & (vals > 0)
        logs = np.where(pos, np.log(np.where(pos, vals, 1.0)), 0.0)
        n = pos.sum(axis=1)
        count[:, p] = n
        has = n > 0
        mean[has, p] = logs[has].sum(axis=1) / n[has]
        two = n > 1
        dev = np.where(pos, logs - np.nan_to_num(mean[:, p])[:, None], 0.0)
        sd[two, p] = np.sqrt((dev[two] ** 2).sum(axis=1) / (n[two] - 1))
    return EmpiricalMoments(mean, sd, count)


@dataclass(frozen=True, eq=False)
class BasisSet:
    """Gaussian kernels at several resolutions.

    ``centers[r]`` is a (K_r, 2) array and ``bandwidths[r]`` the kernel
    scale at resolution ``r``.
    """

    centers: tuple
    bandwidths: tuple

    @property
    def sizes(self):
        return tuple(len(c) for c in self.centers)

    def evaluate(self, locations) -> np.ndarray:
        """Design matrix with one column per kernel, resolutions concatenated."""
        loc = np.asarray(locations, dtype=float)
        blocks = []
        for c, b in zip(self.centers, self.bandwidths):
            d2 = ((loc[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
            blocks.append(np.exp(-d2 / (2.0 * b * b)))
        return np.hstack(blocks)


def make_basis(locations, grid_sizes=(5, 9, 17), bandwidth_factor=1.5) -> BasisSet:
    """Regular center grids over the bounding box of ``locations``."""
    loc = np.asarray(locations, dtype=float)
    lo, hi = loc.min(axis=0), loc.max(axis=0)
    if not all(a < b for a, b in zip(grid_sizes, grid_sizes[1:])):
        raise ParameterError("grid sizes must increase with resolution")
    centers, bws = [], []
    for g in grid_sizes:
        xs = np.linspace(lo[0], hi[0], g)
        ys = np.linspace(lo[1], hi[1], g)
        cx, cy = np.meshgrid(xs, ys)
        centers.append(np.column_stack([cx.ravel(), cy.ravel()]))
        step = max((hi - lo).max() / (g - 1), 1e-12)
        bws.append(bandwidth_factor * step)
    return BasisSet(tuple(centers), tuple(bws))


@dataclass
class SmootherModel:
    """Fitted trend, basis weights and variance components."""

    beta: np.ndarray
    weights: np.ndarray
    tau2: np.ndarray
    sigma2_xi: float
    sigma2_e: float
    loglik: float = float("nan")
    n_iter: int = 0
    history: list = field(default_factory=list)
    fine_scale: np.ndarray | None = None
    locations: np.ndarray | None = None


def _trend(locations):
    loc = np.asarray(locations, dtype=float)
    return np.column_stack([np.ones(len(loc)), loc[:, 0], loc[:, 1]])


class _Posterior:
    """Conditional law of the basis weights given variance components.

    Works with scaled weights ``v = w / tau`` so zero variances are
    handled without dividing by them.
    """

    def __init__(self, Phi, scale, sigma2, gram=None):
        Pt = Phi * scale[None, :]
        self.Pt, self.scale, self.sigma2 = Pt, scale, sigma2
        if gram is None:
            gram = Phi.T @ Phi
        B = np.eye(Phi.shape[1]) + scale[:, None] * gram * scale[None, :] / sigma2
        self.U = sla.cholesky(B, lower=False)
        self.n = Phi.shape[0]

    def logdet_v(self):
        return self.n * math.log(self.sigma2) + 2.0 * float(np.log(np.diag(self.U)).sum())

    def mean(self, resid):
        v = sla.cho_solve((self.U, False), self.Pt.T @ resid / self.sigma2)
        return self.scale * v

    def quad_v(self, resid):
        # resid' V^-1 resid via Woodbury
        a = sla.solve_triangular(self.U, self.Pt.T @ resid, trans="T", lower=False)
        return float(resid @ resid) / self.sigma2 - float(a @ a) / self.sigma2 ** 2

    def cov_w(self):
        Binv, info = sla.lapack.dpotri(self.U, lower=0)
        if info != 0:
            raise np.linalg.LinAlgError("inverse from Cholesky factor failed")
        Binv = np.triu(Binv) + np.triu(Binv, 1).T
        return self.scale[:, None] * Binv * self.scale[None, :]


def _loglik(post, resid):
    return -0.5 * (post.n * math.log(2 * math.pi) + post.logdet_v() + post.quad_v(resid))


def fit_smoother(y, locations, basis: BasisSet, *, sigma2_e=None, variances=None,
                 max_steps=MAX_EM_STEPS, tol=EM_TOL) -> SmootherModel:
    """Fit the low-rank smoother to a per-pixel field with missing values.

    Parameters
    ----------
    y : ndarray, shape (N,)
        Noisy per-pixel estimates; NaN marks missing pixels.
    locations : ndarray, shape (N, 2)
    basis : BasisSet
    sigma2_e : float, optional
        Known measurement-error variance. Without it the nugget cannot be
        split and is reported entirely as ``sigma2_e``.
    variances : tuple, optional
        ``(tau2, sigma2)`` to freeze the variance components; the fit is
        then linear in ``y``.

    Returns
    -------
    SmootherModel
    """
    y = np.asarray(y, dtype=float)
    loc = np.asarray(locations, dtype=float)
    keep = np.isfinite(y)
    if keep.sum() < 10:
        raise ParameterError(f"need at least 10 non-missing pixels, got {int(keep.sum())}")
    yk, Xk = y[keep], _trend(loc[keep])
    Phi = basis.evaluate(loc[keep])
    sizes = basis.sizes
    groups = np.repeat(np.arange(len(sizes)), sizes)

    beta_ols, *_ = np.linalg.lstsq(Xk, yk, rcond=None)
    r0 = yk - Xk @ beta_ols
    if variances is None and float(r0 @ r0) <= 1e-20 * max(float(yk @ yk), 1.0):
        warnings.warn("field is explained exactly by the trend; variance components set to zero", stacklevel=2)
        return SmootherModel(beta_ols, np.zeros(Phi.shape[1]), np.zeros(len(sizes)), 0.0, 0.0,
                             loglik=float("inf"), locations=loc[keep])

    if variances is not None:
        tau2 = np.asarray(variances[0], dtype=float)
        sigma2 = float(variances[1])
        post = _Posterior(Phi, np.sqrt(tau2[groups]), sigma2)
        beta = _gls_beta(post, Xk, yk)
        resid = yk - Xk @ beta
        m = post.mean(resid)
        return _finish(beta, m, tau2, sigma2, sigma2_e, _loglik(post, resid), 0, [], yk, Xk, Phi, loc[keep])

    # starting values split the residual variance between basis and nugget
    v0 = float(r0 @ r0) / len(yk)
    tau2 = np.full(len(sizes), 0.5 * v0 / len(sizes))
    sigma2 = max(0.5 * v0, sigma2_e or 0.0, 1e-12)
    beta = beta_ols
    history = []
    prev = -np.inf
    n = len(yk)
    gram = Phi.T @ Phi
    for step in range(1, max_steps + 1):
        post = _Posterior(Phi, np.sqrt(tau2[groups]), sigma2, gram)
        resid = yk - Xk @ beta
        ll = _loglik(post, resid)
        if ll < prev - 1e-9 * abs(prev):
            raise AssertionError(f"EM log-likelihood decreased at step {step}: {prev} -> {ll}")
        history.append(ll)
        if np.isfinite(prev) and abs(ll - prev) <= tol * abs(prev):
            break
        prev = ll
        m = post.mean(resid)
        S = post.cov_w()
        for r in range(len(sizes)):
            g = groups == r
            tau2[r] = (float(m[g] @ m[g]) + float(np.trace(S[np.ix_(g, g)]))) / g.sum()
        beta, *_ = np.linalg.lstsq(Xk, yk - Phi @ m, rcond=None)
        e = yk - Xk @ beta - Phi @ m
        trace_term = float(np.sum(S * gram))
        sigma2 = (float(e @ e) + trace_term) / n
        sigma2 = max(sigma2, sigma2_e or 0.0, 1e-12 * v0)
    post = _Posterior(Phi, np.sqrt(tau2[groups]), sigma2)
    resid = yk - Xk @ beta
    m = post.mean(resid)
    return _finish(beta, m, tau2, sigma2, sigma2_e, history[-1], step, history, yk, Xk, Phi, loc[keep])


def _gls_beta(post, X, y):
    # beta = (X' V^-1 X)^-1 X' V^-1 y using the Woodbury form of V^-1
    def vinv(b):
        a = sla.cho_solve((post.U, False), post.Pt.T @ b / post.sigma2)
        return (b - post.Pt @ a) / post.sigma2

    ViX = vinv(X)
    return np.linalg.solve(X.T @ ViX, ViX.T @ y)


def _finish(beta, m, tau2, sigma2, sigma2_e, ll, steps, history, y, X, Phi, loc):
    if sigma2_e is None:
        s_xi, s_e = 0.0, sigma2
    else:
        s_e = float(sigma2_e)
        s_xi = max(sigma2 - s_e, 0.0)
    fine = None
    if s_xi > 0:
        fine = s_xi / sigma2 * (y - X @ beta - Phi @ m)
    return SmootherModel(np.asarray(beta), m, np.asarray(tau2, dtype=float).copy(), s_xi, s_e,
                         loglik=ll, n_iter=steps, history=history, fine_scale=fine, locations=loc)


def predict_surface(model: SmootherModel, basis: BasisSet, locations) -> np.ndarray:
    """Conditional mean of the smooth field at ``locations``.

    Fine-scale variation is added back only at the fitted pixels when a
    nonzero fine-scale variance was estimated.
    """
    loc = np.asarray(locations, dtype=float)
    out = _trend(loc) @ model.beta + basis.evaluate(loc) @ model.weights
    if model.fine_scale is not None and model.locations is not None:
        index = {tuple(p): k for k, p in enumerate(model.locations)}
        for i, p in enumerate(loc):
            k = index.get(tuple(p))
            if k is not None:
                out[i] += model.fine_scale[k]
    return out


@dataclass(frozen=True, eq=False)
class Surfaces:
    """Smoothed location and scale surfaces of log BA (1) and log CNT (2)."""

    mu1: np.ndarray
    sigma1: np.ndarray
    mu2: np.ndarray
    sigma2: np.ndarray
    pixel_ids: tuple = ()

    def mean(self, p):
        return self.mu1 if p == 0 else self.mu2

    def sd(self, p):
        return self.sigma1 if p == 0 else self.sigma2


def fit_surfaces(panel: ObservationPanel, basis: BasisSet | None = None, return_models=False):
    """Moments, then smoothing of means and of log SDs for both variables."""
    basis = basis or make_basis(panel.locations)
    mom = empirical_moments(panel)
    out, models = {}, {}
    for p, tag in enumerate(("1", "2")):
        mm = fit_smoother(mom.mean[:, p], panel.locations, basis)
        sd = mom.sd[:, p]
        # a zero SD (repeated identical values) has no finite log; treat as missing
        log_sd = np.where(sd > 0, np.log(np.where(sd > 0, sd, 1.0)), np.nan)
        ms = fit_smoother(log_sd, panel.locations, basis)
        out["mu" + tag] = predict_surface(mm, basis, panel.locations)
        out["sigma" + tag] = np.exp(predict_surface(ms, basis, panel.locations))
        models["mu" + tag], models["sigma" + tag] = mm, ms
    surf = Surfaces(pixel_ids=tuple(panel.pixel_ids), **out)
    return (surf, models) if return_models else surf


@dataclass(frozen=True, eq=False)
class StandardizedPanel:
    """Standardized log values; shape (N, T, 2) with a presence mask."""

    w: np.ndarray
    present: np.ndarray
    locations: np.ndarray | None = None

    @property
    def shape(self):
        return self.w.shape


def _check_sd(surfaces):
    if np.any(~(surfaces.sigma1 > 0)) or np.any(~(surfaces.sigma2 > 0)):
        raise ParameterError("SD surfaces must be strictly positive")


def standardize(panel: ObservationPanel, surfaces: Surfaces) -> StandardizedPanel:
    """``(log value - mu) / sigma`` at observed positive cells, NaN elsewhere."""
    _check_sd(surfaces)
    w = np.full((panel.N, panel.T, 2), np.nan)
    present = np.zeros((panel.N, panel.T, 2), dtype=bool)
    for p, (vals, obs) in enumerate(((panel.ba, panel.ba_obs), (panel.cnt, panel.cnt_obs))):
        pos = obs & (vals > 0)
        logs = np.log(np.where(pos, vals, 1.0))
        w[:, :, p] = np.where(pos, (logs - surfaces.mean(p)[:, None]) / surfaces.sd(p)[:, None], np.nan)
        present[:, :, p] = pos
    return StandardizedPanel(w, present, panel.locations)


def destandardize(w, surfaces: Surfaces) -> np.ndarray:
    """Inverse of :func:`standardize` on an (N, T, 2) array of standardized values."""
    _check_sd(surfaces)
    w = np.asarray(w, dtype=float)
    out = np.empty_like(w)
    for p in range(2):
        out[:, :, p] = surfaces.mean(p)[:, None] + surfaces.sd(p)[:, None] * w[:, :, p]
    return out


def write_surfaces_csv(surfaces: Surfaces, path) -> None:
    ids = surfaces.pixel_ids or tuple(range(len(surfaces.mu1)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pixel_id", "mu1", "sigma1", "mu2", "sigma2"])
        for k, pid in enumerate(ids):
            w.writerow([pid, *(repr(float(a[k])) for a in (surfaces.mu1, surfaces.sigma1, surfaces.mu2, surfaces.sigma2))])


def read_surfaces_csv(path) -> Surfaces:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = {k: np.array([float(r[k]) for r in rows]) for k in ("mu1", "sigma1", "mu2", "sigma2")}
    ids = []
    for r in rows:
        try:
            ids.append(int(r["pixel_id"]))
        except ValueError:
            ids.append(r["pixel_id"])
    return Surfaces(pixel_ids=tuple(ids), **cols)
