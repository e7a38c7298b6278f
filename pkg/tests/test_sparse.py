"""Sparse container, LU, and adjoint tests.

Dense oracles: for x = A^-1 b with loss = c . x, the adjoint identities are
  d loss/d b    = A^-T c
  d loss/d A_ij = -(A^-T c)_i x_j
and for y = A x with loss = c . y,
  d loss/d x    = A^T c
  d loss/d A_ij = c_i x_j.
Both are checked entrywise against numpy.linalg solves.
"""

import io

import numpy as np
import pytest
import scipy.io
import scipy.sparse

from flowgrad import ops
from flowgrad.errors import ContractError, NumericError, SingularMatrixError
from flowgrad.sparse import (
    CsrMatrix,
    LuFactors,
    SparseBlock,
    sparse_solve,
    spmv_fixed,
    spmv_pattern,
    write_matrix_market,
)
from flowgrad.tape import Tape, finite_difference_check


def _random_spd_like(n, seed, density=0.3):
    rng = np.random.default_rng(seed)
    sp = scipy.sparse.random(n, n, density=density, random_state=rng, format="csr")
    sp = sp + n * scipy.sparse.eye(n, format="csr")
    return CsrMatrix.from_scipy(sp)


def test_dense_roundtrip():
    dense = np.array([[1.0, 0.0, 2.0], [0.0, 0.0, 0.0], [3.0, 4.0, 0.0]])
    m = CsrMatrix.from_dense(dense)
    np.testing.assert_array_equal(m.to_dense(), dense)
    assert m.nnz == 4


def test_from_coo_sums_duplicates():
    m = CsrMatrix.from_coo(2, 2, [0, 0, 1], [1, 1, 0], [2.0, 3.0, 4.0])
    np.testing.assert_array_equal(m.to_dense(), [[0.0, 5.0], [4.0, 0.0]])


def test_invalid_structure_rejected():
    with pytest.raises(ContractError):
        CsrMatrix(2, 2, np.array([0, 1]), np.array([0]), np.array([1.0]))
    with pytest.raises(ContractError):
        CsrMatrix(2, 2, np.array([0, 2, 2]), np.array([1, 0]), np.array([1.0, 2.0]))
    with pytest.raises(ContractError):
        CsrMatrix(2, 2, np.array([0, 1, 2]), np.array([0, 5]), np.array([1.0, 2.0]))
    with pytest.raises(ContractError):
        CsrMatrix(2, 2, np.array([0, 1, 2]), np.array([0, 0]), np.array([1.0]))


def test_spmv_matches_dense():
    m = _random_spd_like(12, seed=3)
    x = np.random.default_rng(4).normal(size=12)
    np.testing.assert_allclose(m.spmv(x), m.to_dense() @ x, rtol=1e-13)
    with pytest.raises(ContractError):
        m.spmv(np.zeros(5))


def test_entry_index_lookup():
    m = CsrMatrix.from_dense(np.array([[1.0, 0.0], [0.0, 2.0]]))
    p = m.pattern
    assert p.entry_index(0, 0) == 0
    assert p.entry_index(1, 1) == 1
    assert p.entry_index(0, 1) == -1


def test_lu_solve_matches_dense():
    m = _random_spd_like(20, seed=5)
    rng = np.random.default_rng(6)
    b = rng.normal(size=20)
    lu = LuFactors(m)
    np.testing.assert_allclose(lu.solve(b), np.linalg.solve(m.to_dense(), b),
                               rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(lu.solve_transpose(b),
                               np.linalg.solve(m.to_dense().T, b),
                               rtol=1e-10, atol=1e-12)


def test_lu_rejects_bad_inputs():
    m = _random_spd_like(4, seed=7)
    with pytest.raises(ContractError):
        LuFactors(scipy.sparse.random(3, 4, density=0.5, format="csr"))
    with pytest.raises(ContractError):
        LuFactors(m).solve(np.zeros(3))
    bad = scipy.sparse.csr_matrix(np.array([[1.0, np.nan], [0.0, 1.0]]))
    with pytest.raises(NumericError):
        LuFactors(bad)


def test_singular_empty_row_reports_pivot():
    dense = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 3.0]])
    with pytest.raises(SingularMatrixError) as err:
        LuFactors(scipy.sparse.csr_matrix(dense))
    assert err.value.pivot_index == 1


def test_singular_dependent_rows_reports_pivot():
    # structurally full but rank-deficient; the dense diagnostic must locate
    # a dead pivot
    dense = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [1.0, 1.0, 1.0]])
    with pytest.raises(SingularMatrixError) as err:
        LuFactors(scipy.sparse.csr_matrix(dense))
    assert 0 <= err.value.pivot_index <= 2


def test_sparse_solve_adjoint_matches_dense_identities():
    n = 25
    m = _random_spd_like(n, seed=8)
    rng = np.random.default_rng(9)
    b = rng.normal(size=n)
    c = rng.normal(size=n)

    t = Tape()
    data = t.variable(m.data)
    rhs = t.variable(b)
    x_ref = sparse_solve(t, SparseBlock(m.pattern, data), rhs)
    loss = ops.dot(t, t.constant(c), x_ref)
    grads = t.backward(loss)

    dense = m.to_dense()
    x = np.linalg.solve(dense, b)
    lam = np.linalg.solve(dense.T, c)
    np.testing.assert_allclose(t.value(x_ref), x, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(grads[rhs], lam, rtol=1e-10, atol=1e-12)
    pat = m.pattern
    expected = -lam[pat.rows] * x[pat.indices]
    np.testing.assert_allclose(grads[data], expected, rtol=1e-10, atol=1e-12)


def test_sparse_solve_gradient_matches_fd():
    n = 8
    m = _random_spd_like(n, seed=10)
    rng = np.random.default_rng(11)
    b = rng.normal(size=n)
    c = rng.normal(size=n)
    nnz = m.nnz

    def f(theta):
        t = Tape()
        th = t.variable(theta)
        data = ops.slice1d(t, th, 0, nnz)
        rhs = ops.slice1d(t, th, nnz, nnz + n)
        x = sparse_solve(t, SparseBlock(m.pattern, data), rhs)
        loss = ops.dot(t, t.constant(c), x)
        return t.value(loss)[0], t.backward(loss)[th]

    theta0 = np.concatenate([m.data, b])
    assert finite_difference_check(f, theta0, indices=range(0, theta0.size, 7)) < 1e-6


def test_spmv_pattern_adjoint_matches_dense_identities():
    n = 15
    m = _random_spd_like(n, seed=12)
    rng = np.random.default_rng(13)
    x0 = rng.normal(size=n)
    c = rng.normal(size=n)

    t = Tape()
    data = t.variable(m.data)
    x = t.variable(x0)
    y = spmv_pattern(t, SparseBlock(m.pattern, data), x)
    loss = ops.dot(t, t.constant(c), y)
    grads = t.backward(loss)

    dense = m.to_dense()
    np.testing.assert_allclose(grads[x], dense.T @ c, rtol=1e-12, atol=1e-13)
    pat = m.pattern
    np.testing.assert_allclose(grads[data], c[pat.rows] * x0[pat.indices],
                               rtol=1e-12, atol=1e-13)


def test_spmv_fixed_backward_is_transpose_matvec():
    m = _random_spd_like(10, seed=14)
    rng = np.random.default_rng(15)
    x0 = rng.normal(size=10)
    c = rng.normal(size=10)

    t = Tape()
    x = t.variable(x0)
    y = spmv_fixed(t, m, x)
    loss = ops.dot(t, t.constant(c), y)
    grads = t.backward(loss)
    np.testing.assert_allclose(grads[x], m.to_dense().T @ c, rtol=1e-12, atol=1e-13)


def test_matrix_market_roundtrip(tmp_path):
    m = _random_spd_like(9, seed=16)
    path = tmp_path / "matrix.mtx"
    write_matrix_market(path, m)
    back = scipy.io.mmread(io.StringIO(path.read_text()))
    np.testing.assert_allclose(back.toarray(), m.to_dense(), rtol=0, atol=0)


def test_pattern_shared_between_blocks():
    m = _random_spd_like(6, seed=17)
    pat = m.pattern
    assert pat.nnz == m.nnz
    assert pat.rows.shape == (m.nnz,)
    # rows must agree with indptr expansion
    for k in range(pat.nnz):
        i = pat.rows[k]
        assert pat.indptr[i] <= k < pat.indptr[i + 1]
