"""Severity thresholds, the weighted CDF score, cross-validation masks and benchmarks."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr
from scipy.stats import poisson

from .exceptions import ParameterError, ValidationError
from .panel import ObservationPanel

__all__ = [
    "U_CNT",
    "U_BA",
    "thresholds",
    "raw_weights",
    "weight_vector",
    "validate_cdf",
    "challenge_score",
    "MaskPattern",
    "make_cv_mask",
    "apply_mask",
    "write_mask_csv",
    "read_mask_csv",
    "ols_fit",
    "poisson_irls",
    "benchmark_ba",
    "benchmark_cnt",
    "format_score_report",
]

U_CNT = np.array(list(range(11)) + list(range(12, 31, 2)) + list(range(40, 101, 10)), dtype=float)
U_BA = np.array(
    [0, 1] + list(range(10, 101, 10))
    + [150, 200, 250, 300, 400, 500, 1000, 1500, 2000, 5000, 10000, 20000, 30000, 40000, 50000, 100000],
    dtype=float,
)


def thresholds(variable):
    """Threshold grid for ``"ba"`` or ``"cnt"``."""
    key = str(variable).lower()
    if key == "ba":
        return U_BA.copy()
    if key == "cnt":
        return U_CNT.copy()
    raise ParameterError(f"unknown variable {variable!r}")


def raw_weights(u):
    u = np.asarray(u, dtype=float)
    return 1.0 - (1.0 + (u + 1.0) ** 2 / 1000.0) ** -0.25


def weight_vector(u) -> np.ndarray:
    """Score weights at thresholds ``u``, rescaled to sum to one."""
    w = raw_weights(u)
    return w / w.sum()


def validate_cdf(cdf, tol=1e-12):
    """Raise :class:`ValidationError` unless rows are nondecreasing values in [0, 1]."""
    cdf = np.asarray(cdf, dtype=float)
    if not np.all(np.isfinite(cdf)):
        raise ValidationError("CDF contains non-finite values")
    if np.any(cdf < -tol) or np.any(cdf > 1 + tol):
        raise ValidationError("CDF values outside [0, 1]")
    if np.any(np.diff(cdf, axis=-1) < -tol):
        raise ValidationError("CDF decreases in the threshold")


def challenge_score(predicted, observed, u, weights=None) -> float:
    """``sum_cells sum_u w(u) (1{y <= u} - F(u))^2``.

    Parameters
    ----------
    predicted : ndarray, shape (n_cells, n_thresholds)
    observed : ndarray, shape (n_cells,)
    u : ndarray, shape (n_thresholds,)
    weights : ndarray, optional
        Defaults to :func:`weight_vector` of ``u``.
    """
    F = np.atleast_2d(np.asarray(predicted, dtype=float))
    y = np.atleast_1d(np.asarray(observed, dtype=float))
    u = np.asarray(u, dtype=float)
    if F.shape != (len(y), len(u)):
        raise ParameterError(f"predicted has shape {F.shape}, expected {(len(y), len(u))}")
    validate_cdf(F)
    w = weight_vector(u) if weights is None else np.asarray(weights, dtype=float)
    step = (y[:, None] <= u[None, :]).astype(float)
    return float(np.sum(w[None, :] * (step - F) ** 2))


@dataclass
class MaskPattern:
    """Cells hidden for cross-validation, per variable, with donor provenance."""

    ba: np.ndarray
    cnt: np.ndarray
    scheme: str
    donors: list = field(default_factory=list)

    @property
    def n_masked(self):
        return int(self.ba.sum() + self.cnt.sum())


def make_cv_mask(panel: ObservationPanel, scheme: str, rng, n_targets=None) -> MaskPattern:
    """Copy missingness patterns of incomplete periods onto complete ones.

    Parameters
    ----------
    panel : ObservationPanel
    scheme : {"fixed-month", "random-month"}
        Donors share the target's calendar month under ``fixed-month`` and
        are any incomplete period under ``random-month``.
    rng : numpy.random.Generator
    n_targets : int, optional
        Number of complete periods to mask; defaults to
        ``min(#complete, #incomplete)``. Under ``fixed-month`` only targets
        whose calendar month has a donor are eligible.
    """
    if scheme not in ("fixed-month", "random-month"):
        raise ParameterError(f"unknown scheme {scheme!r}")
    missing = ~panel.ba_obs | ~panel.cnt_obs
    incomplete = np.flatnonzero(missing.any(axis=0))
    complete = np.flatnonzero(~missing.any(axis=0))
    if complete.size == 0:
        raise ParameterError("panel has no complete periods to mask")
    if incomplete.size == 0:
        raise ParameterError("panel has no incomplete periods to copy patterns from")
    months = panel.months
    if scheme == "fixed-month":
        eligible = np.array([t for t in complete if np.any(months[incomplete] == months[t])], dtype=int)
        if eligible.size == 0:
            raise ParameterError("no complete period shares a calendar month with an incomplete one")
    else:
        eligible = complete
    n = min(len(complete), len(incomplete)) if n_targets is None else int(n_targets)
    n = min(n, len(eligible))
    targets = np.sort(rng.choice(eligible, size=n, replace=False))
    ba = np.zeros((panel.N, panel.T), dtype=bool)
    cnt = np.zeros((panel.N, panel.T), dtype=bool)
    donors = []
    for t in targets:
        pool = incomplete[months[incomplete] == months[t]] if scheme == "fixed-month" else incomplete
        d = int(rng.choice(pool))
        ba[:, t] = ~panel.ba_obs[:, d]
        cnt[:, t] = ~panel.cnt_obs[:, d]
        donors.append((int(t), d))
    return MaskPattern(ba=ba, cnt=cnt, scheme=scheme, donors=donors)


def apply_mask(panel: ObservationPanel, mask: MaskPattern) -> ObservationPanel:
    return panel.masked(ba_hide=mask.ba, cnt_hide=mask.cnt)


def write_mask_csv(mask: MaskPattern, panel: ObservationPanel, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pixel_id", "year", "month", "variable"])
        for name, arr in (("ba", mask.ba), ("cnt", mask.cnt)):
            for i, t in np.argwhere(arr):
                year, month = panel.period_labels[t]
                w.writerow([panel.pixel_ids[i], year, month, name])


def read_mask_csv(path, panel: ObservationPanel, scheme="file") -> MaskPattern:
    pix = {str(p): i for i, p in enumerate(panel.pixel_ids)}
    per = {(int(y), int(m)): t for t, (y, m) in enumerate(panel.period_labels)}
    ba = np.zeros((panel.N, panel.T), dtype=bool)
    cnt = np.zeros((panel.N, panel.T), dtype=bool)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            i = pix[row["pixel_id"]]
            t = per[(int(row["year"]), int(row["month"]))]
            (ba if row["variable"] == "ba" else cnt)[i, t] = True
    return MaskPattern(ba=ba, cnt=cnt, scheme=scheme)


def _check_design(X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < X.shape[1] or np.linalg.matrix_rank(X) < X.shape[1]:
        raise ParameterError("design matrix is singular")
    return X


def ols_fit(X, y):
    """Least-squares coefficients and residual variance."""
    X = _check_design(X)
    y = np.asarray(y, dtype=float)
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    dof = max(len(y) - X.shape[1], 1)
    return beta, float(resid @ resid) / dof


def poisson_irls(X, y, max_iter=100, tol=1e-12):
    """Poisson regression with log link by iteratively reweighted least squares."""
    X = _check_design(X)
    y = np.asarray(y, dtype=float)
    beta = np.zeros(X.shape[1])
    beta[0] = np.log(max(y.mean(), 1e-8)) if np.allclose(X[:, 0], 1) else 0.0

    def deviance(b):
        eta = np.clip(X @ b, -30, 30)
        return float(np.sum(np.exp(eta) - y * eta))

    dev = deviance(beta)
    for _ in range(max_iter):
        eta = np.clip(X @ beta, -30, 30)
        mu = np.exp(eta)
        z = eta + (y - mu) / mu
        XtW = X.T * mu
        new = np.linalg.solve(XtW @ X, XtW @ z)
        step = new - beta
        # step halving keeps the objective decreasing
        for _ in range(30):
            cand = beta + step
            dev_c = deviance(cand)
            if dev_c <= dev + 1e-12 * abs(dev):
                break
            step *= 0.5
        converged = abs(dev - dev_c) <= tol * max(abs(dev), 1.0)
        beta, dev = cand, dev_c
        if converged:
            break
    return beta


def benchmark_cnt(X_train, y_train, X_test, u=U_CNT):
    """Poisson regression CDFs at ``u`` for each test row."""
    beta = poisson_irls(X_train, y_train)
    rate = np.exp(np.clip(np.asarray(X_test, dtype=float) @ beta, -30, 30))
    return poisson.cdf(np.asarray(u)[None, :], rate[:, None])


def benchmark_ba(X_train, log_ba_train, X_test, p_test, u=U_BA):
    """Log-Gaussian regression for positive BA mixed with a point mass at zero.

    ``p_test`` holds per-cell occurrence probabilities (empirical pixel
    frequencies in the standard benchmark).
    """
    beta, s2 = ols_fit(X_train, log_ba_train)
    mean = np.asarray(X_test, dtype=float) @ beta
    u = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore"):
        logu = np.where(u > 0, np.log(np.where(u > 0, u, 1.0)), -np.inf)
    f = np.where(u[None, :] > 0, ndtr((logu[None, :] - mean[:, None]) / np.sqrt(s2)), 0.0)
    p = np.asarray(p_test, dtype=float)[:, None]
    return (1 - p) + p * f


def format_score_report(rows) -> str:
    """Plain-text table from ``(model, scheme, score)`` rows."""
    rows = list(rows)
    schemes = list(dict.fromkeys(s for _, s, _ in rows))
    models = list(dict.fromkeys(m for m, _, _ in rows))
    table = {(m, s): v for m, s, v in rows}
    width = max([len("Model")] + [len(m) for m in models]) + 2
    lines = ["Model".ljust(width) + "".join(s.rjust(16) for s in schemes)]
    lines.append("-" * len(lines[0]))
    for m in models:
        cells = [f"{table[(m, s)]:16.4f}" if (m, s) in table else " " * 15 + "-" for s in schemes]
        lines.append(m.ljust(width) + "".join(cells))
    return "\n".join(lines) + "\n"
