"""SPDE precision matrices, sparse Cholesky factors and Matérn correlations.

The precision for range ``phi`` (degrees) and smoothness 1 is

    Q(phi) = phi^2 / (4 pi) * (phi^-4 C + 2 phi^-2 G1 + G2)

which gives approximately unit marginal variance away from the mesh
boundary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .exceptions import AssemblyError, NotPositiveDefiniteError, ParameterError, SizeError
from .mesh import FemMatrices

__all__ = [
    "MaternParams",
    "SpdePrecision",
    "SpdeOperator",
    "SparseCholesky",
    "bessel_k1",
    "x_k1",
    "matern_correlation",
    "assemble_precision",
    "sample_gmrf",
    "approx_covariance",
    "dump_coo",
]

EULER_GAMMA = 0.57721566490153286061
DENSE_CAP = 500


@dataclass(frozen=True)
class MaternParams:
    range: float
    ratio: float = 1.0
    smoothness: float = 1.0

    def __post_init__(self):
        if not self.range > 0:
            raise ParameterError(f"range must be positive, got {self.range}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ParameterError(f"ratio must lie in [0, 1], got {self.ratio}")
        if self.smoothness != 1.0:
            raise ParameterError("only smoothness 1 is supported")


def _x_k1_series(x):
    # x K1(x) = 1 + x ln(x/2) I1(x) - (x^2/4) sum_k [psi(k+1)+psi(k+2)] y^k / (k!(k+1)!)
    y = 0.25 * x * x
    term = np.ones_like(x)
    i1_sum = np.zeros_like(x)
    psi_sum = np.zeros_like(x)
    psi1 = -EULER_GAMMA
    for k in range(40):
        psi2 = psi1 + 1.0 / (k + 1)
        i1_sum += term
        psi_sum += (psi1 + psi2) * term
        psi1 = psi2
        term = term * y / ((k + 1) * (k + 2))
    i1 = 0.5 * x * i1_sum
    with np.errstate(divide="ignore", invalid="ignore"):
        log_term = np.where(x > 0, x * np.log(0.5 * x) * i1, 0.0)
    return 1.0 + log_term - y * psi_sum


def _k01_continued_fraction(x):
    # Steed's method for K0 and K1, valid for x >= 2
    b = 2.0 * (1.0 + x)
    d = 1.0 / b
    h = d.copy()
    delh = d.copy()
    q1 = np.zeros_like(x)
    q2 = np.ones_like(x)
    a1 = 0.25
    q = np.full_like(x, a1)
    c = a1
    a = -a1
    s = 1.0 + q * delh
    for i in range(2, 200):
        a -= 2 * (i - 1)
        c = -a * c / i
        qnew = (q1 - b * q2) / a
        q1, q2 = q2, qnew
        q = q + c * qnew
        b = b + 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        h = h + delh
        dels = q * delh
        s = s + dels
        if np.all(np.abs(dels / s) < 1e-16):
            break
    h = a1 * h
    k0 = np.sqrt(np.pi / (2.0 * x)) * np.exp(-x) / s
    k1 = k0 * (x + 0.5 - h) / x
    return k0, k1


def x_k1(x):
    """``x * K1(x)`` for ``x >= 0``, equal to 1 at the origin."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = x < 2.0
    out[small] = _x_k1_series(x[small])
    big = ~small
    if np.any(big):
        xb = x[big]
        finite = xb < 700
        vals = np.zeros_like(xb)
        if np.any(finite):
            vals[finite] = xb[finite] * _k01_continued_fraction(xb[finite])[1]
        out[big] = vals
    return out


def bessel_k1(x):
    """Modified Bessel function of the second kind, order one."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("K1 is defined for x > 0")
    return x_k1(x) / x


def matern_correlation(d, params: MaternParams | None = None, *, range=None, ratio=None):
    """Matérn correlation with smoothness 1 plus a nugget at distance zero.

    ``ratio * (d/range) K1(d/range) + (1 - ratio) * [d == 0]``.
    """
    if params is None:
        params = MaternParams(range=range, ratio=1.0 if ratio is None else ratio)
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    corr = params.ratio * x_k1(d / params.range) + (1.0 - params.ratio) * (d == 0)
    return corr if corr.ndim else float(corr)


@dataclass(frozen=True, eq=False)
class SpdePrecision:
    Q: sp.csr_matrix
    phi: float


class SpdeOperator:
    """Fast repeated assembly of ``Q(phi)`` on one mesh.

    ``C``, ``G1`` and ``G2`` are stored on the common sparsity pattern of
    ``G2`` so that a new precision is a weighted sum of three data arrays.
    """

    def __init__(self, fem: FemMatrices):
        self.fem = fem
        pattern = (abs(fem.G2) + abs(fem.G1) + fem.C).tocsr()
        pattern.sort_indices()
        pattern.data[:] = 1.0
        self.pattern = pattern
        self._c = self._on_pattern(fem.C)
        self._g1 = self._on_pattern(fem.G1)
        self._g2 = self._on_pattern(fem.G2)
        self.ordering = reverse_cuthill_mckee(pattern, symmetric_mode=True)
        self.n = pattern.shape[0]

    def _on_pattern(self, M):
        coo = self.pattern.tocoo()
        M = sp.csr_matrix(M)
        vals = np.asarray(M[coo.row, coo.col]).ravel()
        if not np.isclose(vals.sum(), M.sum()):
            raise AssemblyError("matrix pattern is not contained in the G2 pattern")
        return vals

    def precision(self, phi: float) -> SpdePrecision:
        if not phi > 0 or not np.isfinite(phi):
            raise ParameterError(f"range must be positive and finite, got {phi}")
        scale = phi * phi / (4.0 * math.pi)
        data = scale * (phi ** -4 * self._c + 2.0 * phi ** -2 * self._g1 + self._g2)
        if not np.all(np.isfinite(data)):
            raise AssemblyError(f"non-finite precision entries at phi={phi}")
        Q = sp.csr_matrix((data, self.pattern.indices, self.pattern.indptr), shape=self.pattern.shape)
        return SpdePrecision(Q=Q, phi=float(phi))

    def factor(self, M) -> SparseCholesky:
        return SparseCholesky(M, self.ordering)


def assemble_precision(fem: FemMatrices, phi: float) -> SpdePrecision:
    """SPDE precision matrix for range ``phi``."""
    return SpdeOperator(fem).precision(phi)


class SparseCholesky:
    """Banded Cholesky factor ``P M P' = L L'`` under a bandwidth-reducing ordering.

    Reverse Cuthill-McKee keeps the band of mesh-based precisions narrow,
    so the factor and all solves cost ``O(n * bandwidth^2)``.
    """

    def __init__(self, M, ordering=None):
        M = sp.csr_matrix(M)
        n = M.shape[0]
        if ordering is None:
            ordering = reverse_cuthill_mckee(M, symmetric_mode=True)
        self.perm = np.asarray(ordering)
        self.inv_perm = np.empty_like(self.perm)
        self.inv_perm[self.perm] = np.arange(n)
        Mp = M[self.perm][:, self.perm].tocoo()
        upper = Mp.row <= Mp.col
        rows, cols, vals = Mp.row[upper], Mp.col[upper], Mp.data[upper]
        u = int((cols - rows).max()) if len(rows) else 0
        ab = np.zeros((u + 1, n))
        np.add.at(ab, (u + rows - cols, cols), vals)
        try:
            self._ub = sla.cholesky_banded(ab, lower=False, check_finite=True)
        except (sla.LinAlgError, ValueError) as exc:
            raise NotPositiveDefiniteError(str(exc)) from exc
        self.bandwidth = u
        self.n = n

    @property
    def L(self) -> sp.csr_matrix:
        """Lower factor in the permuted ordering."""
        u = self.bandwidth
        bands = [self._ub[k, u - k:] for k in range(u + 1)]
        U = sp.diags(bands, np.arange(u, -1, -1), shape=(self.n, self.n))
        return U.T.tocsr()

    @property
    def P(self) -> sp.csr_matrix:
        n = self.n
        return sp.csr_matrix((np.ones(n), (np.arange(n), self.perm)), shape=(n, n))

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(self._ub[-1])))

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        x = sla.cho_solve_banded((self._ub, False), b[self.perm], check_finite=False)
        return x[self.inv_perm]

    def solve_upper(self, z):
        """``P' U^-1 z`` where ``U = L'``; maps N(0, I) draws to N(0, M^-1)."""
        z = np.asarray(z, dtype=float)
        x = sla.solve_banded((0, self.bandwidth), self._ub, z, check_finite=False)
        return x[self.inv_perm]

    def quad(self, x):
        """``x' M x`` column-wise, computed from the factor."""
        x = np.asarray(x, dtype=float)
        y = _upper_band_matvec(self._ub, self.bandwidth, x[self.perm])
        return np.sum(y * y, axis=0)


def _upper_band_matvec(ub, u, x):
    n = ub.shape[1]
    out = np.zeros_like(x)
    for k in range(u + 1):
        off = u - k  # superdiagonal offset of row k in band storage
        if x.ndim == 1:
            out[: n - off] += ub[k, off:] * x[off:]
        else:
            out[: n - off] += ub[k, off:, None] * x[off:]
    return out


def sample_gmrf(Q, rng: np.random.Generator, size=None, factor: SparseCholesky | None = None):
    """Draw from ``Normal(0, Q^-1)``.

    ``size`` adds trailing replicate columns; the result has shape ``(n,)``
    or ``(n, size)``.
    """
    if isinstance(Q, SpdePrecision):
        Q = Q.Q
    factor = factor or SparseCholesky(Q)
    shape = (factor.n,) if size is None else (factor.n, size)
    return factor.solve_upper(rng.standard_normal(shape))


def approx_covariance(A, Q, ratio: float, cap: int = DENSE_CAP) -> np.ndarray:
    """Dense ``ratio * A Q^-1 A' + (1 - ratio) I`` for validation at small N."""
    if isinstance(Q, SpdePrecision):
        Q = Q.Q
    A = sp.csr_matrix(A)
    n = A.shape[0]
    if n > cap:
        raise SizeError(f"dense covariance for N={n} exceeds cap {cap}")
    if not 0.0 <= ratio <= 1.0:
        raise ParameterError(f"ratio must lie in [0, 1], got {ratio}")
    if ratio == 0.0:
        return np.eye(n)
    X = SparseCholesky(Q).solve(A.T.toarray())
    S = ratio * (A @ X)
    S = 0.5 * (S + S.T)
    S[np.diag_indices(n)] += 1.0 - ratio
    return S


def dump_coo(M, path) -> None:
    """Write ``row,col,value`` triplets of a sparse matrix."""
    M = sp.coo_matrix(M)
    with open(path, "w") as fh:
        fh.write("row,col,value\n")
        for i, j, v in zip(M.row, M.col, M.data):
            fh.write(f"{i},{j},{v!r}\n")
