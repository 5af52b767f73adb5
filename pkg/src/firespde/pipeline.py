"""End-to-end fitting, prediction and cross-validated scoring.

The chain of stages is: occurrence probit (Stage 1), smoothed location
and scale surfaces (Stage 2), the bivariate latent model (Stage 3) and the
random-forest rectification of counts (Stage 4).  Benchmarks and an
intercept-only LGCP are fitted on the same masked panel for comparison.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .bivariate import Stage3Config, cell_predictive_cdf, run_stage3
from .evaluation import (
    U_BA,
    U_CNT,
    MaskPattern,
    apply_mask,
    benchmark_ba,
    benchmark_cnt,
    challenge_score,
    make_cv_mask,
    poisson_irls,
)
from .exceptions import ParameterError
from .gmrf import SpdeOperator, approx_covariance
from .forest import ForestModel, bin_label, predict_class_probs, rf_predictive_cdf, train_forest
from .lgcp import LgcpConfig, lgcp_predictive_cdf, run_lgcp
from .mcmc import Chain
from .mesh import MeshConfig, TriMesh, assemble_fem, build_mesh, project
from .occurrence import Stage1Config, predict_cell_prob, run_stage1
from .panel import ObservationPanel, build_indicator, propagate_zeros
from .smoother import Surfaces, fit_surfaces, make_basis, standardize

__all__ = [
    "PipelineConfig",
    "FittedPipeline",
    "CVResult",
    "occurrence_probability",
    "rf_features",
    "varying_columns",
    "kriged_log_cnt",
    "fit_pipeline",
    "predict_pipeline",
    "predict_benchmarks",
    "predict_lgcp",
    "cross_validate",
]

log = logging.getLogger(__name__)

MODEL_PIPELINE = "Bivariate spatial model"
MODEL_BENCHMARK = "Benchmark model"
MODEL_LGCP = "LGCP intercept-only"


@dataclass
class PipelineConfig:
    mesh: MeshConfig = field(default_factory=MeshConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    lgcp: LgcpConfig = field(default_factory=LgcpConfig)
    basis_grid: tuple = (5, 9, 17)
    ntree: int = 200
    mtry: int | None = None
    n_impute: int = 20


@dataclass
class FittedPipeline:
    mesh: TriMesh
    A: object
    stage1: Chain
    surfaces: Surfaces
    stage3: Chain
    forest: ForestModel
    p: np.ndarray
    log_cnt_pred: np.ndarray
    panel: ObservationPanel
    design: np.ndarray


@dataclass
class CVResult:
    scheme: str
    mask: MaskPattern
    scores: dict
    n_cells: dict

    def rows(self):
        return [(f"{m} ({v.upper()})", self.scheme, s) for (m, v), s in self.scores.items()]


def occurrence_probability(panel: ObservationPanel, chain: Chain) -> np.ndarray:
    """Cellwise occurrence probability: 1 or 0 where occurrence is known, else Stage 1."""
    ind = build_indicator(panel)
    p = predict_cell_prob(chain)
    return np.where(ind.observed, ind.z.astype(float), np.clip(p, 0.0, 1.0))


def varying_columns(design) -> np.ndarray:
    """Boolean mask of design columns that are not constant over pixels."""
    return np.ptp(np.asarray(design, dtype=float), axis=0) > 0


def rf_features(design, log1p_ba, log_cnt_pred, keep=None) -> np.ndarray:
    """Stage-4 feature rows: non-constant pixel covariates, ``log(1 + BA)``
    and the Stage-3 prediction of log CNT.

    ``keep`` selects covariate columns; it must come from the full design
    so that a subset of rows yields the same columns.
    """
    D = np.atleast_2d(np.asarray(design, dtype=float))
    cov = D[:, varying_columns(D) if keep is None else keep]
    log1p_ba = np.atleast_1d(np.asarray(log1p_ba, dtype=float))
    return np.column_stack([cov, log1p_ba, np.atleast_1d(log_cnt_pred)])


def kriged_log_cnt(panel: ObservationPanel, surfaces: Surfaces, chain: Chain, mesh: TriMesh, A) -> np.ndarray:
    """Stage-3 prediction of log CNT at every cell, leaving the cell's own count out.

    Uses the posterior-mean covariance parameters and conditions, period by
    period, on every other standardized value present (both variables, the
    cell's own BA included). Training and prediction cells thus get a
    feature of the same kind.
    """
    phi, r = float(np.mean(chain["phi"])), float(np.mean(chain["r"]))
    rho = float(np.mean(chain["rho"])) if "rho" in chain else 0.0
    Q = SpdeOperator(assemble_fem(mesh)).precision(phi).Q
    S = approx_covariance(A, Q, r, cap=A.shape[0])
    std = standardize(panel, surfaces)
    N, T = panel.N, panel.T
    pred = np.zeros((N, T))
    for t in range(T):
        o1 = np.flatnonzero(std.present[:, t, 0])
        o2 = np.flatnonzero(std.present[:, t, 1])
        if o1.size + o2.size == 0:
            continue
        cov = np.block([[S[np.ix_(o1, o1)], rho * S[np.ix_(o1, o2)]],
                        [rho * S[np.ix_(o2, o1)], S[np.ix_(o2, o2)]]])
        y = np.concatenate([std.w[o1, t, 0], std.w[o2, t, 1]])
        L = sla.cho_factor(cov, lower=True)
        K = sla.cho_solve(L, np.eye(len(y)))
        alpha = K @ y
        pred[:, t] = np.column_stack([rho * S[:, o1], S[:, o2]]) @ alpha
        j = o1.size + np.arange(o2.size)
        pred[o2, t] = y[j] - alpha[j] / K[j, j]
    return surfaces.mu2[:, None] + surfaces.sigma2[:, None] * pred


def fit_pipeline(panel: ObservationPanel, design, config: PipelineConfig | None = None, rng=None,
                 predict_cells=None) -> FittedPipeline:
    """Fit Stages 1 to 4 on a (possibly masked) panel.

    Parameters
    ----------
    panel : ObservationPanel
    design : ndarray, shape (N, p)
        Pixel covariates for the occurrence mean, with an intercept column.
    predict_cells : ndarray of bool, shape (N, T), optional
        Cells whose latent quantities are stored; defaults to every cell
        with a missing variable.
    """
    config = config or PipelineConfig()
    rng = rng if rng is not None else np.random.default_rng()
    if predict_cells is None:
        predict_cells = ~(panel.ba_obs & panel.cnt_obs)
    filled = propagate_zeros(panel)
    mesh = build_mesh(filled.locations, config.mesh)
    A = project(mesh, filled.locations)

    log.info("stage 1: occurrence")
    ch1 = run_stage1(build_indicator(filled), design, mesh, config.stage1, rng,
                     predict_cells=predict_cells, A=A)
    p = occurrence_probability(filled, ch1)

    log.info("stage 2: surfaces")
    surfaces = fit_surfaces(filled, make_basis(filled.locations, config.basis_grid))

    log.info("stage 3: bivariate field")
    ch3 = run_stage3(standardize(filled, surfaces), mesh, config.stage3, rng,
                     A=A, predict_cells=predict_cells)

    log.info("stage 4: random forest")
    krig = kriged_log_cnt(filled, surfaces, ch3, mesh, A)
    train = filled.cnt_obs & filled.ba_obs
    pix = np.nonzero(train)[0]
    X = rf_features(np.asarray(design)[pix], np.log1p(filled.ba[train]), krig[train],
                    keep=varying_columns(design))
    y = bin_label(filled.cnt[train])
    forest = train_forest(X, y, mtry=config.mtry, ntree=config.ntree, rng=rng)
    return FittedPipeline(mesh, A, ch1, surfaces, ch3, forest, p, krig, filled, np.asarray(design, dtype=float))


def _impute_log1p_ba(fit: FittedPipeline, cells, n_impute, rng):
    """Draws of ``log(1 + BA)`` at flat cells from Stages 1 and 3 jointly."""
    T = fit.panel.T
    pix, per = np.divmod(cells, T)
    ch1, ch3 = fit.stage1, fit.stage3
    n1, n3 = len(ch1), len(ch3)
    idx1 = {c: k for k, c in enumerate(ch1.meta["predict_cells"])}
    idx3 = {c: k for k, c in enumerate(ch3.meta["predict_cells"])}
    pos1 = np.array([idx1.get(c, -1) for c in cells.tolist()])
    pos3 = np.array([idx3[c] for c in cells.tolist()])
    d1 = rng.integers(0, n1, size=(len(cells), n_impute))
    d3 = rng.integers(0, n3, size=(len(cells), n_impute))
    prob = np.where(pos1[:, None] >= 0, ch1["cell_prob"][d1, np.maximum(pos1, 0)[:, None]],
                    fit.p[pix, per][:, None])
    known = build_indicator(fit.panel).observed[pix, per]
    prob = np.where(known[:, None], fit.p[pix, per][:, None], prob)
    occur = rng.random(prob.shape) < prob
    eta = ch3["eta_pred"][d3, pos3[:, None], 0]
    r = ch3["r"][d3]
    w = eta + np.sqrt(1 - r) * rng.standard_normal(eta.shape)
    log_ba = fit.surfaces.mu1[pix][:, None] + fit.surfaces.sigma1[pix][:, None] * w
    return np.where(occur, np.log1p(np.exp(np.minimum(log_ba, 700.0))), 0.0)


def predict_pipeline(fit: FittedPipeline, ba_cells, cnt_cells, rng=None, n_impute=20):
    """Predictive CDFs at flat cell indices.

    BA uses the zero-inflated lognormal mixture from Stages 1 and 3. CNT
    uses forest vote shares; where BA is missing they are averaged over
    joint draws of BA from Stages 1 and 3.

    Returns
    -------
    ba_cdf : ndarray, shape (len(ba_cells), 28)
    cnt_cdf : ndarray, shape (len(cnt_cells), 28)
    """
    rng = rng if rng is not None else np.random.default_rng()
    ba_cells = np.asarray(ba_cells, dtype=int)
    cnt_cells = np.asarray(cnt_cells, dtype=int)
    T = fit.panel.T
    if ba_cells.size:
        _, ba_cdf = cell_predictive_cdf(fit.stage3, fit.surfaces, fit.p, U_BA, 0, cells=ba_cells)
    else:
        ba_cdf = np.empty((0, len(U_BA)))
    cnt_cdf = np.empty((cnt_cells.size, len(U_CNT)))
    if cnt_cells.size:
        pix, per = np.divmod(cnt_cells, T)
        keep = varying_columns(fit.design)
        ba_known = fit.panel.ba_obs[pix, per]
        if ba_known.any():
            X = rf_features(fit.design[pix[ba_known]], np.log1p(fit.panel.ba[pix[ba_known], per[ba_known]]),
                            fit.log_cnt_pred[pix[ba_known], per[ba_known]], keep)
            cnt_cdf[ba_known] = rf_predictive_cdf(predict_class_probs(fit.forest, X))
        miss = np.flatnonzero(~ba_known)
        if miss.size:
            draws = _impute_log1p_ba(fit, cnt_cells[miss], n_impute, rng)
            X = rf_features(np.repeat(fit.design[pix[miss]], n_impute, axis=0), draws.ravel(),
                            np.repeat(fit.log_cnt_pred[pix[miss], per[miss]], n_impute), keep)
            probs = predict_class_probs(fit.forest, X).reshape(miss.size, n_impute, -1).mean(axis=1)
            cnt_cdf[miss] = rf_predictive_cdf(probs)
        # a known zero count is certain
        zero = fit.p[pix, per] == 0
        cnt_cdf[zero] = 1.0
    return ba_cdf, np.clip(cnt_cdf, 0.0, 1.0)


def predict_benchmarks(panel: ObservationPanel, design, ba_cells, cnt_cells):
    """CDFs from the Poisson-regression (CNT) and log-Gaussian (BA) benchmarks.

    The BA benchmark uses the count as a covariate, filled by the Poisson
    regression where missing, and pixel occurrence frequencies for the
    zero mass.
    """
    D = np.asarray(design, dtype=float)
    N, T = panel.N, panel.T
    pix_all = np.repeat(np.arange(N), T)
    cnt_tr = panel.cnt_obs.ravel()
    beta = poisson_irls(D[pix_all[cnt_tr]], panel.cnt.ravel()[cnt_tr].astype(float))
    rate = np.exp(np.clip(D @ beta, -30, 30))
    cnt_filled = np.where(panel.cnt_obs, panel.cnt, rate[:, None])

    cnt_cells = np.asarray(cnt_cells, dtype=int)
    cnt_cdf = benchmark_cnt(D[pix_all[cnt_tr]], panel.cnt.ravel()[cnt_tr].astype(float),
                            D[cnt_cells // T], U_CNT)

    Xba = np.column_stack([D[pix_all], np.log1p(cnt_filled.ravel())])
    pos = (panel.ba_obs & (panel.ba > 0)).ravel()
    n_obs = panel.ba_obs.sum(axis=1)
    freq = np.where(n_obs > 0, (panel.ba_obs & (panel.ba > 0)).sum(axis=1) / np.maximum(n_obs, 1), 0.5)
    ba_cells = np.asarray(ba_cells, dtype=int)
    ba_cdf = benchmark_ba(Xba[pos], np.log(panel.ba.ravel()[pos]), Xba[ba_cells], freq[ba_cells // T], U_BA)
    return ba_cdf, cnt_cdf


def predict_lgcp(panel: ObservationPanel, mesh: TriMesh, cnt_cells, config: LgcpConfig, rng, A=None):
    """Intercept-only LGCP predictive CDFs for CNT at flat cells."""
    cnt_cells = np.asarray(cnt_cells, dtype=int)
    cells = np.zeros(panel.N * panel.T, dtype=bool)
    cells[cnt_cells] = True
    chain = run_lgcp(panel.cnt, panel.cnt_obs, np.ones((panel.N, 1)), mesh, config, rng,
                     locations=panel.locations, A=A, predict_cells=cells.reshape(panel.N, panel.T))
    stored = np.asarray(chain.meta["predict_cells"], dtype=int)
    lookup = {c: k for k, c in enumerate(stored.tolist())}
    return lgcp_predictive_cdf(chain, U_CNT, cells=[lookup[c] for c in cnt_cells.tolist()])


def cross_validate(panel: ObservationPanel, design, scheme="fixed-month", config: PipelineConfig | None = None,
                   rng=None, models=(MODEL_PIPELINE, MODEL_BENCHMARK, MODEL_LGCP), mask=None) -> CVResult:
    """Mask complete periods, refit every model on the rest and score held-out cells."""
    config = config or PipelineConfig()
    rng = rng if rng is not None else np.random.default_rng()
    mask = mask if mask is not None else make_cv_mask(panel, scheme, rng)
    if mask.n_masked == 0:
        raise ParameterError("mask hides no cells")
    train = apply_mask(panel, mask)
    ba_cells = np.flatnonzero(mask.ba.ravel())
    cnt_cells = np.flatnonzero(mask.cnt.ravel())
    y_ba = panel.ba.ravel()[ba_cells]
    y_cnt = panel.cnt.ravel()[cnt_cells]
    scores = {}

    def score(model, ba_cdf, cnt_cdf):
        if ba_cdf is not None:
            scores[(model, "ba")] = challenge_score(ba_cdf, y_ba, U_BA)
        if cnt_cdf is not None:
            scores[(model, "cnt")] = challenge_score(cnt_cdf, y_cnt, U_CNT)

    fit = None
    if MODEL_PIPELINE in models:
        fit = fit_pipeline(train, design, config, rng)
        score(MODEL_PIPELINE, *predict_pipeline(fit, ba_cells, cnt_cells, rng, config.n_impute))
    if MODEL_BENCHMARK in models:
        score(MODEL_BENCHMARK, *predict_benchmarks(train, design, ba_cells, cnt_cells))
    if MODEL_LGCP in models:
        mesh = fit.mesh if fit is not None else build_mesh(train.locations, config.mesh)
        A = fit.A if fit is not None else None
        score(MODEL_LGCP, None, predict_lgcp(train, mesh, cnt_cells, config.lgcp, rng, A=A))
    return CVResult(scheme=mask.scheme, mask=mask, scores=scores,
                    n_cells={"ba": int(ba_cells.size), "cnt": int(cnt_cells.size)})

