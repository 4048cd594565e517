import time

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp

from picar.basis import (MoranBasis, bisquare_basis, identity_kernel, knot_grid,
                         leading_eigenpairs, load_basis, matern_eigenbasis, moran_basis,
                         moran_operator, parallel_moran_blocks, precision_kernel,
                         precision_matrix, save_basis, thin_plate_basis)
from picar.exceptions import SingularKernelError
from picar.mesh import adjacency, build_mesh

from oracles import dense_moran

# P N P for the 3-node path graph, worked by hand in exact fractions.
PATH3_MORAN = np.array([[-2, 4, -2], [4, -8, 4], [-2, 4, -2]]) / 9.0


def random_graph(m, density, seed):
    rng = np.random.default_rng(seed)
    U = sp.random(m, m, density=density, random_state=rng, data_rvs=lambda k: np.ones(k))
    N = ((U + U.T) > 0).astype(float).tolil()
    N.setdiag(0)
    return N.tocsr()


def test_path_graph_dense():
    N = sp.csr_matrix([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
    np.testing.assert_allclose(moran_operator(N).todense(), PATH3_MORAN, atol=1e-15)
    np.testing.assert_allclose(dense_moran(N), PATH3_MORAN, atol=1e-15)


def test_ones_in_null_space(unit_adjacency):
    op = moran_operator(unit_adjacency)
    assert np.abs(op @ np.ones(op.m)).max() < 1e-12


def test_implicit_matches_dense():
    N = random_graph(200, 0.03, 0)
    op = moran_operator(N)
    D = dense_moran(N)
    v = np.random.default_rng(1).standard_normal(200)
    np.testing.assert_allclose(op @ v, D @ v, atol=1e-12)


def test_operator_symmetric(unit_adjacency):
    op = moran_operator(unit_adjacency)
    rng = np.random.default_rng(3)
    u, v = rng.standard_normal((2, op.m))
    assert abs(u @ (op @ v) - v @ (op @ u)) < 1e-10


@pytest.mark.parametrize("K", [1, 3, 4, 7])
def test_parallel_blocks_invariant(K):
    N = random_graph(200, 0.03, 2)
    ref = moran_operator(N).todense()
    got = parallel_moran_blocks(N, K, n_workers=2)
    np.testing.assert_allclose(got, ref, atol=1e-12)
    if K == 1:
        np.testing.assert_array_equal(got, ref)


@pytest.mark.skipif((__import__("os").cpu_count() or 1) < 4, reason="needs at least 4 CPUs")
def test_parallel_blocks_wall_time():
    N = random_graph(2000, 0.003, 4)
    t0 = time.perf_counter()
    parallel_moran_blocks(N, 1, n_workers=1)
    t1 = time.perf_counter()
    parallel_moran_blocks(N, 4, n_workers=4)
    t2 = time.perf_counter()
    assert t2 - t1 < t1 - t0


def test_lanczos_matches_dense(unit_adjacency):
    op = moran_operator(unit_adjacency)
    lz = leading_eigenpairs(op, 50, method="lanczos", seed=1)
    de = leading_eigenpairs(op, 50, method="dense")
    np.testing.assert_allclose(lz.values, de.values, rtol=1e-8)
    s = np.linalg.svd(lz.vectors.T @ de.vectors, compute_uv=False)
    # cos of the largest principal angle; 1 - cos(1e-6) = 5e-13
    assert s.min() > 1 - 5e-13


def test_basis_invariants(unit_adjacency):
    op = moran_operator(unit_adjacency)
    B = moran_basis(unit_adjacency, 80)
    M, lam = B.vectors, B.values
    np.testing.assert_allclose(M.T @ M, np.eye(B.rank), atol=1e-8)
    assert np.all(lam > 0) and np.all(np.diff(lam) <= 0)
    res = np.linalg.norm(op @ M - M * lam, axis=0)
    assert res.max() <= 1e-6
    assert np.abs(M.sum(axis=0)).max() <= 1e-8


def test_only_positive_retained():
    N = random_graph(60, 0.1, 5)
    B = moran_basis(N, 55)
    assert B.rank < 55 and B.n_requested == 55
    assert np.all(B.values > 0)


def test_sign_convention_and_determinism(unit_adjacency):
    B1 = moran_basis(unit_adjacency, 20, method="lanczos", seed=0)
    B2 = moran_basis(unit_adjacency, 20, method="lanczos", seed=0)
    np.testing.assert_array_equal(B1.vectors, B2.vectors)
    for col in B1.vectors.T:
        first = col[np.abs(col) > 1e-10 * np.abs(col).max()][0]
        assert first > 0


def test_bad_p_max(unit_adjacency):
    with pytest.raises(ValueError):
        moran_basis(unit_adjacency, 0)
    with pytest.raises(ValueError):
        moran_basis(unit_adjacency, unit_adjacency.shape[0])


def test_precision_row_sums(unit_adjacency):
    N = unit_adjacency
    deg = np.asarray(N.sum(axis=1)).ravel()
    Qi = precision_matrix("icar", N)
    assert np.abs(np.asarray(Qi.sum(axis=1)).ravel()).max() == 0
    Qc = precision_matrix("car", N, 0.5)
    np.testing.assert_allclose(np.asarray(Qc.sum(axis=1)).ravel(), 0.5 * deg)
    assert (abs(Qc - Qc.T)).nnz == 0


def test_identity_kernel(unit_adjacency):
    B = moran_basis(unit_adjacency, 20)
    k = precision_kernel("ind", unit_adjacency, B)
    np.testing.assert_allclose(k.K, np.eye(20), atol=1e-10)
    assert k.is_identity
    assert identity_kernel(5).quad(np.ones(5)) == 5.0


def test_icar_kernel_dense_oracle():
    mesh = build_mesh(np.random.default_rng(0).uniform(size=(120, 2)), 200, 0.1)
    N = adjacency(mesh)
    B = moran_basis(N, 20)
    k = precision_kernel("icar", N, B)
    Nd = N.toarray()
    Q = np.diag(Nd.sum(axis=1)) - Nd
    np.testing.assert_allclose(k.K, B.vectors.T @ Q @ B.vectors, atol=1e-10)
    np.testing.assert_allclose(k.chol @ k.chol.T, k.K, atol=1e-10)


def test_car_continuity(unit_adjacency):
    B = moran_basis(unit_adjacency, 30)
    Ki = precision_kernel("icar", unit_adjacency, B).K
    Kc = precision_kernel("car", unit_adjacency, B, 1 - 1e-6).K
    assert np.abs(Ki - Kc).max() <= 1e-4


def test_car_rho_range(unit_adjacency):
    with pytest.raises(ValueError):
        precision_matrix("car", unit_adjacency, 1.0)


def test_singular_kernel():
    # ICAR annihilates constants, so a basis containing the constant vector is singular.
    N = random_graph(30, 0.2, 1)
    M = np.ones((30, 1)) / np.sqrt(30)
    with pytest.raises(SingularKernelError):
        precision_kernel("icar", N, M)


def test_bisquare_closed_form():
    c = np.array([[0.5, 0.5]])
    assert bisquare_basis(c, c, 0.3)[0, 0] == 1.0
    assert bisquare_basis([[0.8, 0.5]], c, 0.3)[0, 0] == pytest.approx(0.0, abs=1e-15)
    rng = np.random.default_rng(0)
    s = rng.uniform(size=(200, 2))
    knots = knot_grid(64)
    B = bisquare_basis(s, knots, 0.3)
    d = np.linalg.norm(s[:, None] - knots[None], axis=-1)
    assert B.min() >= 0 and B.max() <= 1
    assert np.array_equal(B == 0, d >= 0.3)


def test_thin_plate_closed_form():
    c = np.array([[0.0, 0.0]])
    assert thin_plate_basis([[1.0, 0.0]], c)[0, 0] == 0.0
    assert thin_plate_basis(c, c)[0, 0] == 0.0
    assert thin_plate_basis([[2.0, 0.0]], c)[0, 0] == pytest.approx(4 * np.log(2))


def test_knot_grid():
    k = knot_grid(64)
    assert k.shape == (64, 2)
    with pytest.raises(ValueError):
        knot_grid(10)


def test_matern_eigenbasis_orthonormal(unit_mesh):
    _, mesh = unit_mesh
    B = matern_eigenbasis(mesh.vertices, 1.0, 0.2, 2.5, 30)
    np.testing.assert_allclose(B.vectors.T @ B.vectors, np.eye(30), atol=1e-10)
    assert np.all(np.diff(B.values) <= 0)


def test_basis_io(tmp_path, unit_adjacency):
    B = moran_basis(unit_adjacency, 10)
    save_basis(B, tmp_path / "b.txt")
    back = load_basis(tmp_path / "b.txt")
    np.testing.assert_array_equal(back.vectors, B.vectors)
    np.testing.assert_array_equal(back.values, B.values)
    lines = (tmp_path / "b.txt").read_text().splitlines()
    assert lines[0] == f"{B.vectors.shape[0]} 10" and len(lines) == B.vectors.shape[0] + 2


def test_truncate(unit_adjacency):
    B = moran_basis(unit_adjacency, 10)
    assert isinstance(B.truncate(4), MoranBasis) and B.truncate(4).rank == 4
    with pytest.raises(ValueError):
        B.truncate(11)
