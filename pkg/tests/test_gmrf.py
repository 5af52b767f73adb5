import math

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.spatial.distance import pdist, squareform
from scipy.special import k1

from firespde.exceptions import NotPositiveDefiniteError, ParameterError, SizeError
from firespde.gmrf import (
    MaternParams,
    SparseCholesky,
    SpdeOperator,
    approx_covariance,
    assemble_precision,
    bessel_k1,
    matern_correlation,
    sample_gmrf,
    x_k1,
)
from firespde.mesh import MeshConfig, assemble_fem, build_mesh, mesh_from_triangles, project
from firespde.synthetic import grid_locations

# K1 reference values computed once with 30-digit arbitrary precision
K1_REFERENCE = {
    0.01: 99.973894118296244,
    0.5: 1.6564411200033009,
    1.9999: 0.13988426583169103,
    2.0: 0.13986588181652243,
    2.0001: 0.13984750046881139,
    3.7: 0.017628035102223261,
    10.0: 1.8648773453825585e-5,
    30.0: 2.1677320018915495e-14,
}


@pytest.mark.parametrize("x, ref", sorted(K1_REFERENCE.items()))
def test_bessel_k1_reference(x, ref):
    assert bessel_k1(x) == pytest.approx(ref, rel=1e-10)


def test_bessel_k1_against_scipy():
    x = np.geomspace(1e-4, 80, 400)
    np.testing.assert_allclose(bessel_k1(x), k1(x), rtol=1e-10)
    assert x_k1(0.0) == 1.0


def test_matern_basic():
    assert matern_correlation(0.0, range=2.0, ratio=0.3) == 1.0
    d = np.linspace(0.1, 20, 50)
    c = matern_correlation(d, range=3.0, ratio=0.8)
    assert np.all(np.diff(c) < 0) and np.all(c > 0) and c[0] < 0.8
    with pytest.raises(ValueError):
        MaternParams(range=0.0, ratio=0.5)
    with pytest.raises(ValueError):
        matern_correlation(-1.0, range=1.0)


def test_matern_anchors_reported_values():
    assert matern_correlation(10, range=3.0491, ratio=0.5319) == pytest.approx(0.050, abs=0.002)
    assert matern_correlation(10, range=3.6408, ratio=0.3442) == pytest.approx(0.052, abs=0.002)


def test_single_triangle_precision():
    mesh = mesh_from_triangles([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])
    fem = assemble_fem(mesh)
    C = np.eye(3) / 6
    G1 = np.array([[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]])
    G2 = G1 @ np.linalg.inv(C) @ G1
    Q = assemble_precision(fem, 1.0).Q.toarray()
    np.testing.assert_allclose(Q, (C + 2 * G1 + G2) / (4 * math.pi), atol=1e-12)


def test_precision_dense_oracle(grid8):
    _, mesh = grid8
    fem = assemble_fem(mesh)
    C, G1 = np.diag(fem.c), fem.G1.toarray()
    G2 = G1 @ np.diag(1 / fem.c) @ G1
    for phi in (0.7, 1.4, 2.8):
        dense = phi**2 / (4 * math.pi) * (phi**-4 * C + 2 * phi**-2 * G1 + G2)
        Q = assemble_precision(fem, phi).Q
        np.testing.assert_allclose(Q.toarray(), dense, atol=1e-12)
        np.testing.assert_allclose(Q.toarray(), Q.toarray().T, atol=0)
    with pytest.raises(ParameterError):
        assemble_precision(fem, 0.0)


def test_precision_pattern_is_mesh_neighbourhood(grid8):
    _, mesh = grid8
    fem = assemble_fem(mesh)
    Q = assemble_precision(fem, 1.5).Q.toarray()
    G2 = np.abs(fem.G2.toarray()) + np.abs(fem.G1.toarray()) + np.diag(fem.c)
    assert np.all(Q[G2 == 0] == 0)


def test_cholesky_solve_and_logdet(grid8, rng):
    _, mesh = grid8
    Q = assemble_precision(assemble_fem(mesh), 2.0).Q
    fac = SparseCholesky(Q)
    b = rng.standard_normal(Q.shape[0])
    x = fac.solve(b)
    np.testing.assert_allclose(Q @ x, b, rtol=1e-8, atol=1e-10)
    sign, ld = np.linalg.slogdet(Q.toarray())
    assert sign > 0 and fac.logdet() == pytest.approx(ld, rel=1e-10)
    Qp = Q[fac.perm][:, fac.perm].toarray()
    L = fac.L.toarray()
    np.testing.assert_allclose(L @ L.T, Qp, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(fac.quad(x), x @ (Q @ x), rtol=1e-10)


def test_not_positive_definite():
    with pytest.raises(NotPositiveDefiniteError):
        SparseCholesky(sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 1.0]])))


def test_gmrf_sampling_moments():
    loc = grid_locations(5, 4)
    mesh = build_mesh(loc, MeshConfig(extension=0.0, node_ratio=1.0))
    assert mesh.n_nodes == 20
    Q = assemble_precision(assemble_fem(mesh), 1.5).Q
    rng = np.random.Generator(np.random.Philox(11))
    x = sample_gmrf(Q, rng, size=10_000)
    cov = np.linalg.inv(Q.toarray())
    se = np.sqrt(np.diag(cov) / 10_000)
    assert np.all(np.abs(x.mean(axis=1)) < 3 * se + 1e-12)
    emp = np.cov(x)
    # sampling SE of each covariance entry under Gaussianity
    se_cov = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov**2) / 10_000)
    assert np.all(np.abs(emp - cov) < 4.5 * se_cov)
    np.testing.assert_allclose(np.diag(emp), np.diag(cov), rtol=0.05)
    again = sample_gmrf(Q, np.random.Generator(np.random.Philox(11)), size=10_000)
    np.testing.assert_array_equal(x, again)


def test_approx_covariance_limits(grid8):
    loc, mesh = grid8
    A = project(mesh, loc)
    Q = assemble_precision(assemble_fem(mesh), 2.0)
    np.testing.assert_array_equal(approx_covariance(A, Q, 0.0), np.eye(len(loc)))
    with pytest.raises(SizeError):
        approx_covariance(A, Q, 0.5, cap=10)


def reconstruction_check(phi=3.0, r=0.8):
    loc = grid_locations(20, 20, 1.0)
    mesh = build_mesh(loc, MeshConfig(node_ratio=1.0, extension=0.3))
    A = project(mesh, loc)
    S = approx_covariance(A, assemble_precision(assemble_fem(mesh), phi), r)
    D = squareform(pdist(loc))
    iu = np.triu_indices(len(loc), 1)
    corr = np.corrcoef(S[iu], matern_correlation(D[iu], range=phi, ratio=r))[0, 1]
    return corr, np.diag(S)


def test_covariance_reconstruction():
    corr, diag = reconstruction_check()
    assert corr > 0.99
    assert np.all(np.abs(diag - 1) < 0.15)
