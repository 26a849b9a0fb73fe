"""Sparse symmetric matrices and their LDL' factorization.

The factor keeps a frozen symbolic pattern: once a matrix pattern has been
analyzed, numeric refactorization, row modification and rank-1
update/downdate all work inside the same arrays.  Entries that happen to be
numerically zero are kept as stored slots.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from . import _kernels

# above this size the dense-adjacency minimum degree costs too much memory
MINIMUM_DEGREE_MAX_N = 12000


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a pivot is not strictly positive."""

    def __init__(self, column: int, message: str | None = None):
        self.column = column
        super().__init__(message or f"matrix is not positive definite (column {column})")


class RowModifyError(NotPositiveDefiniteError):
    """A row modification or update/downdate lost positive definiteness."""


class PatternError(ValueError):
    """A modification reached outside the frozen symbolic pattern."""


@dataclass
class SparseSymMatrix:
    """Symmetric matrix in compressed sparse column layout.

    Both triangles are stored so that whole columns can be read directly;
    the lower triangle is authoritative.  Row indices are sorted within each
    column and every diagonal slot is present.
    """

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    @property
    def nnz_lower(self) -> int:
        return (self.nnz + self.n) // 2

    @property
    def is_dense(self) -> bool:
        return self.nnz == self.n * self.n

    def column(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        s, e = self.indptr[j], self.indptr[j + 1]
        return self.indices[s:e], self.data[s:e]

    def diagonal(self) -> np.ndarray:
        cols = np.repeat(np.arange(self.n), np.diff(self.indptr))
        mask = cols == self.indices
        out = np.zeros(self.n)
        out[cols[mask]] = self.data[mask]
        return out

    def col_index(self) -> np.ndarray:
        """Column index of every stored entry."""
        return np.repeat(np.arange(self.n), np.diff(self.indptr))

    def with_data(self, data: np.ndarray) -> "SparseSymMatrix":
        """Same pattern, new values."""
        return SparseSymMatrix(self.n, self.indptr, self.indices, np.asarray(data, float))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.to_scipy() @ x

    def to_scipy(self) -> sp.csc_matrix:
        return sp.csc_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.n))

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    @classmethod
    def from_dense(cls, A: np.ndarray, keep_pattern: np.ndarray | None = None) -> "SparseSymMatrix":
        """Store the nonzeros of ``A`` (or the slots in ``keep_pattern``)."""
        A = np.asarray(A, dtype=float)
        mask = A != 0 if keep_pattern is None else np.asarray(keep_pattern, bool)
        mask = mask | mask.T
        np.fill_diagonal(mask, True)
        rows, cols = np.nonzero(mask.T)
        # nonzero on the transpose walks column by column with sorted rows
        rows, cols = cols, rows
        indptr = np.zeros(A.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(cols, minlength=A.shape[0]), out=indptr[1:])
        return cls(A.shape[0], indptr, rows.astype(np.int64), A[rows, cols])

    @classmethod
    def full(cls, A: np.ndarray) -> "SparseSymMatrix":
        """Completely dense pattern, zeros included."""
        A = np.asarray(A, dtype=float)
        return cls.from_dense(A, keep_pattern=np.ones_like(A, dtype=bool))


def _canonical(n, rows, cols, vals) -> SparseSymMatrix:
    order = np.lexsort((rows, cols))
    rows, cols, vals = rows[order], cols[order], vals[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(cols, minlength=n), out=indptr[1:])
    return SparseSymMatrix(n, indptr, rows.astype(np.int64), vals.astype(float))


def from_triplets(n: int, entries: Iterable[tuple[int, int, float]], *, atol: float = 0.0) -> SparseSymMatrix:
    """Assemble a symmetric matrix from ``(row, col, value)`` triplets.

    Duplicates are summed.  An off-diagonal entry given in only one triangle
    is mirrored; if both triangles are given they must agree.
    """
    ent = list(entries)
    if ent:
        r, c, v = (np.asarray(a) for a in zip(*ent))
    else:
        r = c = np.zeros(0, dtype=np.int64)
        v = np.zeros(0)
    r = r.astype(np.int64)
    c = c.astype(np.int64)
    v = v.astype(float)
    bad = (r < 0) | (r >= n) | (c < 0) | (c >= n)
    if bad.any():
        q = int(np.flatnonzero(bad)[0])
        raise IndexError(f"entry ({r[q]}, {c[q]}) out of range for n={n}")

    keys, inv = np.unique(r * n + c, return_inverse=True)
    summed = np.bincount(inv.ravel(), weights=v, minlength=keys.size)
    kr, kc = keys // n, keys % n
    table = dict(zip(keys.tolist(), summed.tolist()))
    rows, cols, vals = [], [], []
    for key, i, j, x in zip(keys.tolist(), kr.tolist(), kc.tolist(), summed.tolist()):
        if i == j:
            rows.append(i), cols.append(j), vals.append(x)
            continue
        mirror = table.get(j * n + i)
        if mirror is None:
            rows += [i, j]
            cols += [j, i]
            vals += [x, x]
        elif abs(mirror - x) > atol:
            raise ValueError(f"asymmetric values at ({i}, {j}): {x} vs {mirror}")
        else:
            rows.append(i), cols.append(j), vals.append(x)
    present = set(i for i, j in zip(rows, cols) if i == j)
    for i in range(n):
        if i not in present:
            rows.append(i), cols.append(i), vals.append(0.0)
    return _canonical(n, np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64), np.array(vals))


@dataclass
class Permutation:
    """``forward[k]`` is the original index placed at position ``k``."""

    forward: np.ndarray
    inverse: np.ndarray = field(init=False)

    def __post_init__(self):
        self.forward = np.asarray(self.forward, dtype=np.int64)
        n = self.forward.size
        if np.any(np.sort(self.forward) != np.arange(n)):
            raise ValueError("not a permutation")
        self.inverse = np.empty(n, dtype=np.int64)
        self.inverse[self.forward] = np.arange(n)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))

    def __len__(self):
        return self.forward.size


def compute_ordering(pattern: SparseSymMatrix, method: str = "auto") -> Permutation:
    """Fill-reducing ordering of a symmetric pattern.

    ``method`` is one of ``"auto"``, ``"mindegree"``, ``"rcm"`` or
    ``"natural"``.  ``"auto"`` skips ordering for fully dense patterns and
    falls back to reverse Cuthill-McKee above MINIMUM_DEGREE_MAX_N.
    """
    n = pattern.n
    if method == "auto":
        if pattern.is_dense or n <= 1:
            method = "natural"
        elif n <= MINIMUM_DEGREE_MAX_N:
            method = "mindegree"
        else:
            method = "rcm"
    if method == "natural":
        return Permutation.identity(n)
    if method == "mindegree":
        return Permutation(_kernels.minimum_degree(n, pattern.indptr, pattern.indices))
    if method == "rcm":
        perm = reverse_cuthill_mckee(pattern.to_scipy().tocsr(), symmetric_mode=True)
        return Permutation(perm)
    raise ValueError(f"unknown ordering method {method!r}")


@dataclass
class EliminationTree:
    """Symbolic analysis of a permuted pattern.

    Besides the tree itself this carries the frozen pattern of L and the
    permuted matrix pattern needed to refactorize without re-analysis.
    """

    perm: Permutation
    parent: np.ndarray
    counts: np.ndarray  # nonzeros per column of L, diagonal included
    Lp: np.ndarray
    Li: np.ndarray
    Ap: np.ndarray  # permuted pattern, full symmetric CSC
    Ai: np.ndarray
    order: np.ndarray  # data of the original matrix -> permuted slots

    @property
    def n(self) -> int:
        return self.parent.size

    @property
    def nnz_L(self) -> int:
        """Stored entries of L including the unit diagonal."""
        return int(self.Lp[-1]) + self.n


def permute_pattern(pattern: SparseSymMatrix, perm: Permutation):
    pinv = perm.inverse
    cols = pinv[pattern.col_index()]
    rows = pinv[pattern.indices]
    order = np.lexsort((rows, cols))
    Ap = np.zeros(pattern.n + 1, dtype=np.int64)
    np.cumsum(np.bincount(cols, minlength=pattern.n), out=Ap[1:])
    return Ap, rows[order].astype(np.int64), order


def symbolic_analyze(pattern: SparseSymMatrix, perm: Permutation | None = None) -> EliminationTree:
    """Elimination tree and exact fill pattern of L for ``P A P'``."""
    if perm is None:
        perm = compute_ordering(pattern)
    Ap, Ai, order = permute_pattern(pattern, perm)
    parent, lnz, Lp, Li = _kernels.symbolic(pattern.n, Ap, Ai)
    # 32-bit row indices halve the index traffic of the memory-bound sweeps
    Li = Li.astype(np.int32) if pattern.n < 2**31 else Li
    return EliminationTree(perm, parent, lnz + 1, Lp, Li, Ap, Ai, order)


@dataclass
class LdlFactor:
    """``P A P' = L D L'`` with unit lower triangular L on a frozen pattern."""

    symbolic: EliminationTree
    Lx: np.ndarray
    D: np.ndarray
    refactorizations: int = 0

    @property
    def n(self) -> int:
        return self.D.size

    @property
    def perm(self) -> Permutation:
        return self.symbolic.perm

    @property
    def nnz(self) -> int:
        return self.symbolic.nnz_L

    def copy(self) -> "LdlFactor":
        return LdlFactor(self.symbolic, self.Lx.copy(), self.D.copy(), self.refactorizations)

    def L_scipy(self) -> sp.csc_matrix:
        """Unit lower triangular L in permuted index space."""
        s = self.symbolic
        L = sp.csc_matrix((self.Lx, s.Li, s.Lp), shape=(self.n, self.n))
        return (L + sp.identity(self.n, format="csc")).tocsc()

    def cholesky_factor(self) -> sp.csc_matrix:
        """Standard Cholesky factor L D^{1/2}."""
        return (self.L_scipy() @ sp.diags(np.sqrt(self.D))).tocsc()

    def reconstruct(self) -> np.ndarray:
        """Dense ``A`` in original indexing, rebuilt from the factors."""
        L = self.L_scipy().toarray()
        PAPt = (L * self.D) @ L.T
        pinv = self.perm.inverse
        return PAPt[np.ix_(pinv, pinv)]

    def refactor(self, A: SparseSymMatrix) -> "LdlFactor":
        """Numeric refactorization of a matrix with the analyzed pattern."""
        s = self.symbolic
        Ax = np.ascontiguousarray(A.data[s.order])
        status = _kernels.numeric(self.n, s.Ap, s.Ai, Ax, s.Lp, s.Li, s.parent, self.Lx, self.D)
        if status != _kernels.OK:
            raise NotPositiveDefiniteError(int(s.perm.forward[status]))
        self.refactorizations += 1
        return self


def ldl_factorize(A: SparseSymMatrix, symbolic: EliminationTree | None = None) -> LdlFactor:
    """Numeric LDL' factorization confined to the symbolic fill pattern."""
    if symbolic is None:
        symbolic = symbolic_analyze(A)
    if A.nnz != symbolic.order.size:
        raise PatternError("matrix pattern does not match the symbolic analysis")
    f = LdlFactor(symbolic, np.zeros(symbolic.Li.size), np.zeros(A.n))
    f.refactor(A)
    f.refactorizations = 0
    return f


def _as_sparse_pairs(b, n):
    """Accept a dense vector or an ``(indices, values)`` pair."""
    if isinstance(b, tuple):
        idx, val = b
        return np.asarray(idx, dtype=np.int64), np.asarray(val, dtype=float)
    b = np.asarray(b, dtype=float)
    if b.shape != (n,):
        raise ValueError(f"expected vector of length {n}")
    idx = np.flatnonzero(b)
    return idx, b[idx]


def solve(factor: LdlFactor, b) -> np.ndarray:
    """Solve ``A x = b``.

    ``b`` is a dense vector or a sparse ``(indices, values)`` pair in
    original indexing.  Sparse right-hand sides only trigger forward work on
    their elimination-tree reach.
    """
    x, _ = solve_with_quad(factor, b)
    return x


def solve_with_quad(factor: LdlFactor, b) -> tuple[np.ndarray, float]:
    """Like :func:`solve`, also returning ``b' A^-1 b``."""
    n = factor.n
    s = factor.symbolic
    idx, val = _as_sparse_pairs(b, n)
    x, quad = _kernels.solve_sparse(n, s.Lp, s.Li, factor.Lx, factor.D, s.parent, s.perm.inverse[idx], val)
    return x[s.perm.inverse], quad


def solve_dense(factor: LdlFactor, B: np.ndarray) -> np.ndarray:
    """Solve for a dense right-hand side vector or matrix (columns)."""
    s = factor.symbolic
    B = np.asarray(B, dtype=float)
    one = B.ndim == 1
    B2 = B[:, None] if one else B
    out = np.empty_like(B2)
    for c in range(B2.shape[1]):
        x = np.ascontiguousarray(B2[s.perm.forward, c])
        _kernels.solve_dense(factor.n, s.Lp, s.Li, factor.Lx, factor.D, x)
        out[:, c] = x[s.perm.inverse]
    return out[:, 0] if one else out


def inv_quad(factor: LdlFactor, b) -> float:
    """``b' A^-1 b`` from a forward solve over the reach of ``b``."""
    s = factor.symbolic
    idx, val = _as_sparse_pairs(b, factor.n)
    return _kernels.forward_quad(factor.n, s.Lp, s.Li, factor.Lx, factor.D, s.parent, s.perm.inverse[idx], val)


def logdet(factor: LdlFactor) -> float:
    return float(np.sum(np.log(factor.D)))


def _path_check(factor, idx):
    s = factor.symbolic
    if not _kernels.path_closed(factor.n, s.Lp, s.Li, s.parent, np.sort(idx)):
        raise PatternError("vector support is not on a single elimination-tree path")


def rank1_update_downdate(factor: LdlFactor, w1=None, w2=None) -> LdlFactor:
    """In place: ``L D L' <- L D L' + w1 w1' - w2 w2'`` in one fused pass.

    Each vector must be supported on one root path of the elimination tree
    (as a column of L is), otherwise the frozen pattern could not hold the
    result.  On a non-positive pivot the factor is left inconsistent and
    :class:`RowModifyError` is raised; refactorize before reuse.
    """
    n = factor.n
    s = factor.symbolic
    pinv = s.perm.inverse
    W = []
    for w in (w1, w2):
        dense = np.zeros(n)
        if w is not None:
            idx, val = _as_sparse_pairs(w, n)
            keep = val != 0
            pidx = pinv[idx[keep]]
            _path_check(factor, pidx)
            np.add.at(dense, pidx, val[keep])
        W.append(dense)
    status = _kernels.update_downdate(n, s.Lp, s.Li, factor.Lx, factor.D, s.parent, W[0], W[1])
    if status != _kernels.OK:
        raise RowModifyError(int(s.perm.forward[status]), "indefinite downdate")
    return factor


def ldl_row_modify(factor: LdlFactor, new_row, i: int, track=None) -> LdlFactor:
    """In place: replace row and column ``i`` (original indexing).

    ``new_row`` is the complete new column, dense or ``(indices, values)``,
    diagonal included; its pattern must sit inside the fill pattern of L,
    which contains the analyzed matrix pattern.
    ``track = (v, R)`` (dense, permuted) accumulates ``(L_old - L_new) v``
    into R, which lets a caller keep ``L^-1 c`` current.
    Raises :class:`RowModifyError` when positive definiteness is lost, after
    which the factor must be refactorized.
    """
    n = factor.n
    s = factor.symbolic
    idx, val = _as_sparse_pairs(new_row, n)
    k = int(s.perm.inverse[i])
    v, R = track if track is not None else (np.zeros(n), np.zeros(n))
    status = _kernels.row_modify(
        n, s.Ap, s.Ai, s.Lp, s.Li, factor.Lx, factor.D, s.parent, k, s.perm.inverse[idx], val, v, R
    )
    if status == _kernels.PATTERN_ERROR:
        raise PatternError(f"new row {i} leaves the frozen pattern")
    if status != _kernels.OK:
        raise RowModifyError(int(s.perm.forward[status]), f"row-modify failed at row {i}")
    return factor


@dataclass
class SelectedInverse:
    """Inverse entries on the pattern of L (permuted storage)."""

    factor: LdlFactor
    Zx: np.ndarray
    Zd: np.ndarray

    def gather(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Entries at original ``(row, col)`` pairs; NaN outside the pattern."""
        s = self.factor.symbolic
        return _kernels.lookup_lower(
            s.Lp, s.Li, self.Zx, self.Zd, s.perm.inverse,
            np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64),
        )

    def on_pattern(self, A: SparseSymMatrix) -> np.ndarray:
        """Values aligned with the stored entries of ``A``."""
        return self.gather(A.indices, A.col_index())

    def to_matrix(self) -> SparseSymMatrix:
        s = self.factor.symbolic
        n = self.factor.n
        fwd = s.perm.forward
        cols = np.repeat(np.arange(n), np.diff(s.Lp))
        r = fwd[s.Li]
        c = fwd[cols]
        rows = np.concatenate([r, c, fwd])
        cols = np.concatenate([c, r, fwd])
        vals = np.concatenate([self.Zx, self.Zx, self.Zd])
        return _canonical(n, rows, cols, vals)


def selected_inverse(factor: LdlFactor) -> SelectedInverse:
    s = factor.symbolic
    Zx, Zd = _kernels.takahashi(factor.n, s.Lp, s.Li, factor.Lx, factor.D)
    return SelectedInverse(factor, Zx, Zd)


def takahashi_sparse_inverse(factor: LdlFactor) -> SparseSymMatrix:
    """Entries of ``A^-1`` on the fill pattern of L, in original indexing."""
    return selected_inverse(factor).to_matrix()


def read_matrix_market(path) -> SparseSymMatrix:
    A = scipy.io.mmread(path)
    A = sp.coo_matrix(A)
    return from_triplets(A.shape[0], zip(A.row, A.col, A.data), atol=1e-12 * max(1.0, abs(A.data).max(initial=0)))


def write_matrix_market(path, A: SparseSymMatrix, comment: str = "") -> None:
    """Symmetric coordinate format; only the lower triangle is written."""
    scipy.io.mmwrite(path, A.to_scipy().tocoo(), comment=comment, symmetry="symmetric")
