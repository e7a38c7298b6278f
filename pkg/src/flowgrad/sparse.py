"""Sparse CSR containers, LU factorization, and differentiable sparse ops.

The tape never stores sparse matrices directly.  A matrix with a fixed
sparsity pattern lives as a 1-d data array on the tape plus a shared
:class:`SparsePattern`; :class:`SparseBlock` bundles the two.  The adjoint of
``x = solve(A, b)`` needs one transpose solve: with ``lam = A^-T g``,
``d loss/d b = lam`` and ``d loss/d A_ij = -lam_i x_j`` restricted to the
stored pattern.  The backward pass refactorizes from the recorded data rather
than caching the forward factorization.
"""

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse
import scipy.sparse.linalg

from .errors import ContractError, NumericError, SingularMatrixError
from .tape import register_op

__all__ = [
    "CsrMatrix",
    "SparsePattern",
    "SparseBlock",
    "LuFactors",
    "sparse_solve",
    "spmv_pattern",
    "spmv_fixed",
    "write_matrix_market",
]

# Above this size the dense pivot diagnostic is skipped and the pivot index
# reported as unknown (-1).
_PIVOT_DIAG_LIMIT = 2000


def _validate_csr(n_rows, n_cols, indptr, indices, data=None):
    indptr = np.asarray(indptr)
    indices = np.asarray(indices)
    if indptr.shape != (n_rows + 1,):
        raise ContractError(f"indptr length {indptr.shape[0]} != n_rows + 1 = {n_rows + 1}")
    if indptr[0] != 0 or np.any(np.diff(indptr) < 0):
        raise ContractError("indptr must start at 0 and be non-decreasing")
    if indptr[-1] != indices.shape[0]:
        raise ContractError(f"indptr[-1] = {indptr[-1]} != nnz = {indices.shape[0]}")
    if indices.size and (indices.min() < 0 or indices.max() >= n_cols):
        raise ContractError(f"column index outside [0, {n_cols})")
    for i in range(n_rows):
        row = indices[indptr[i]:indptr[i + 1]]
        if np.any(np.diff(row) <= 0):
            raise ContractError(f"row {i}: column indices not strictly increasing")
    if data is not None and np.asarray(data).shape != (indices.shape[0],):
        raise ContractError(f"data length {np.asarray(data).shape} != nnz {indices.shape[0]}")


@dataclass(frozen=True)
class SparsePattern:
    """Fixed CSR sparsity structure shared by many data arrays.

    ``rows[k]`` is the row of stored entry ``k``; it is redundant with
    ``indptr`` but lets kernels and adjoints address entries directly.
    """

    n_rows: int
    n_cols: int
    indptr: np.ndarray
    indices: np.ndarray
    rows: np.ndarray

    @classmethod
    def create(cls, n_rows, n_cols, indptr, indices, validate=True):
        indptr = np.asarray(indptr, dtype=np.int32)
        indices = np.asarray(indices, dtype=np.int32)
        if validate:
            _validate_csr(n_rows, n_cols, indptr, indices)
        rows = np.repeat(np.arange(n_rows, dtype=np.int32), np.diff(indptr))
        return cls(n_rows, n_cols, indptr, indices, rows)

    @property
    def nnz(self):
        return self.indices.shape[0]

    def to_scipy(self, data):
        return scipy.sparse.csr_matrix(
            (data, self.indices, self.indptr), shape=(self.n_rows, self.n_cols)
        )

    def entry_index(self, i, j):
        """Position of entry (i, j) in the data array, or -1 if not stored."""
        lo, hi = self.indptr[i], self.indptr[i + 1]
        k = lo + np.searchsorted(self.indices[lo:hi], j)
        if k < hi and self.indices[k] == j:
            return int(k)
        return -1


@dataclass(frozen=True)
class CsrMatrix:
    """Immutable CSR matrix used outside the tape (constants, export, tests)."""

    n_rows: int
    n_cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        _validate_csr(self.n_rows, self.n_cols, self.indptr, self.indices, self.data)

    @classmethod
    def from_dense(cls, dense):
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim != 2:
            raise ContractError("from_dense expects a 2-d array")
        sp = scipy.sparse.csr_matrix(dense)
        sp.sort_indices()
        return cls(dense.shape[0], dense.shape[1], sp.indptr.astype(np.int32),
                   sp.indices.astype(np.int32), sp.data.astype(np.float64))

    @classmethod
    def from_coo(cls, n_rows, n_cols, rows, cols, vals):
        """Build from triplets; duplicate (row, col) entries are summed."""
        sp = scipy.sparse.coo_matrix(
            (np.asarray(vals, dtype=np.float64), (rows, cols)), shape=(n_rows, n_cols)
        ).tocsr()
        sp.sum_duplicates()
        sp.sort_indices()
        return cls(n_rows, n_cols, sp.indptr.astype(np.int32),
                   sp.indices.astype(np.int32), sp.data.astype(np.float64))

    @classmethod
    def from_scipy(cls, sp):
        sp = sp.tocsr()
        sp.sum_duplicates()
        sp.sort_indices()
        return cls(sp.shape[0], sp.shape[1], sp.indptr.astype(np.int32),
                   sp.indices.astype(np.int32), sp.data.astype(np.float64))

    @property
    def nnz(self):
        return self.data.shape[0]

    @property
    def pattern(self):
        return SparsePattern.create(self.n_rows, self.n_cols, self.indptr,
                                    self.indices, validate=False)

    def to_scipy(self):
        return scipy.sparse.csr_matrix(
            (self.data, self.indices, self.indptr), shape=(self.n_rows, self.n_cols)
        )

    def to_dense(self):
        return self.to_scipy().toarray()

    def spmv(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n_cols,):
            raise ContractError(f"spmv: vector length {x.shape} != n_cols {self.n_cols}")
        return self.to_scipy() @ x


@dataclass(frozen=True)
class SparseBlock:
    """A CSR matrix whose data array lives on the tape at node ``ref``."""

    pattern: SparsePattern
    ref: int


def _first_zero_pivot(dense):
    """Gaussian elimination with partial pivoting; index of the first dead pivot.

    Falls back to the position of the smallest pivot magnitude when no pivot
    is exactly zero (the factorization may have failed under a different
    elimination order).
    """
    a = np.array(dense, dtype=np.float64)
    n = a.shape[0]
    smallest, at = np.inf, n - 1
    for k in range(n):
        col = np.abs(a[k:, k])
        p = int(col.argmax())
        piv = col[p]
        if piv == 0.0 or not np.isfinite(piv):
            return k
        if piv < smallest:
            smallest, at = piv, k
        if p:
            a[[k, k + p]] = a[[k + p, k]]
        a[k + 1:, k] /= a[k, k]
        a[k + 1:, k + 1:] -= np.outer(a[k + 1:, k], a[k, k + 1:])
    return at


def _diagnose_pivot(sp):
    """Best-effort pivot index for a singular factorization."""
    counts_row = np.diff(sp.tocsr().indptr)
    empty = np.flatnonzero(counts_row == 0)
    if empty.size:
        return int(empty[0])
    counts_col = np.diff(sp.tocsc().indptr)
    empty = np.flatnonzero(counts_col == 0)
    if empty.size:
        return int(empty[0])
    if sp.shape[0] <= _PIVOT_DIAG_LIMIT:
        return int(_first_zero_pivot(sp.toarray()))
    return -1


class LuFactors:
    """LU factorization of a square sparse matrix with forward/transpose solves."""

    def __init__(self, matrix):
        if isinstance(matrix, CsrMatrix):
            sp = matrix.to_scipy()
        elif scipy.sparse.issparse(matrix):
            sp = matrix.tocsr()
        else:
            raise ContractError(f"cannot factorize {type(matrix).__name__}")
        if sp.shape[0] != sp.shape[1]:
            raise ContractError(f"matrix is not square: {sp.shape}")
        if not np.all(np.isfinite(sp.data)):
            raise NumericError("matrix has non-finite entries")
        self.n = sp.shape[0]
        try:
            self._lu = scipy.sparse.linalg.splu(sp.tocsc())
        except RuntimeError as exc:
            pivot = _diagnose_pivot(sp)
            raise SingularMatrixError(
                f"LU factorization failed ({exc}); suspected pivot index {pivot}",
                pivot_index=pivot,
            ) from exc

    def _check_rhs(self, b):
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (self.n,):
            raise ContractError(f"rhs length {b.shape} != {self.n}")
        return b

    def solve(self, b):
        return self._lu.solve(self._check_rhs(b))

    def solve_transpose(self, b):
        return self._lu.solve(self._check_rhs(b), trans="T")


# ---------------------------------------------------------------------------
# differentiable ops

def _sparse_solve_fwd(v, ctx):
    data, b = v
    pattern: SparsePattern = ctx["pattern"]
    if pattern.n_rows != pattern.n_cols:
        raise ContractError("sparse_solve: matrix must be square")
    if data.shape != (pattern.nnz,):
        raise ContractError(f"sparse_solve: data length {data.shape} != nnz {pattern.nnz}")
    lu = LuFactors(pattern.to_scipy(data))
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise NumericError("sparse_solve produced non-finite solution")
    ctx["data"], ctx["x"] = data, x
    return x


def _sparse_solve_bwd(g, ctx):
    pattern: SparsePattern = ctx["pattern"]
    lu = LuFactors(pattern.to_scipy(ctx["data"]))
    lam = lu.solve_transpose(g)
    gdata = -lam[pattern.rows] * ctx["x"][pattern.indices]
    return gdata, lam


def _spmv_pattern_fwd(v, ctx):
    data, x = v
    pattern: SparsePattern = ctx["pattern"]
    if data.shape != (pattern.nnz,):
        raise ContractError(f"spmv: data length {data.shape} != nnz {pattern.nnz}")
    if x.shape != (pattern.n_cols,):
        raise ContractError(f"spmv: vector length {x.shape} != n_cols {pattern.n_cols}")
    ctx["data"], ctx["x"] = data, x
    return pattern.to_scipy(data) @ x


def _spmv_pattern_bwd(g, ctx):
    pattern: SparsePattern = ctx["pattern"]
    gx = pattern.to_scipy(ctx["data"]).T @ g
    gdata = g[pattern.rows] * ctx["x"][pattern.indices]
    return gdata, gx


def _spmv_fixed_fwd(v, ctx):
    x = v[0]
    a = ctx["matrix"]
    if x.shape != (a.shape[1],):
        raise ContractError(f"spmv_fixed: vector length {x.shape} != n_cols {a.shape[1]}")
    return a @ x


def _spmv_fixed_bwd(g, ctx):
    return (ctx["matrix"].T @ g,)


register_op("sparse_solve", _sparse_solve_fwd, _sparse_solve_bwd)
register_op("spmv_pattern", _spmv_pattern_fwd, _spmv_pattern_bwd)
register_op("spmv_fixed", _spmv_fixed_fwd, _spmv_fixed_bwd)


def sparse_solve(tape, block: SparseBlock, b):
    """Record ``x = A^-1 b`` for a square on-tape matrix block."""
    return tape.apply("sparse_solve", (block.ref, b), {"pattern": block.pattern})


def spmv_pattern(tape, block: SparseBlock, x):
    """Record ``y = A x`` with gradients to both the matrix data and ``x``."""
    return tape.apply("spmv_pattern", (block.ref, x), {"pattern": block.pattern})


def spmv_fixed(tape, matrix, x):
    """Record ``y = A x`` for a constant matrix (gradient to ``x`` only)."""
    if isinstance(matrix, CsrMatrix):
        matrix = matrix.to_scipy()
    return tape.apply("spmv_fixed", (x,), {"matrix": matrix.tocsr()})


def write_matrix_market(path, matrix):
    """Export to MatrixMarket coordinate format with full float64 precision."""
    if isinstance(matrix, CsrMatrix):
        matrix = matrix.to_scipy()
    scipy.io.mmwrite(str(path), matrix.tocoo(), precision=17)
