import numpy as np
import pytest

from csgpc import _kernels
from csgpc import sparse as sps
from csgpc.sparse import Permutation, SparseSymMatrix, from_triplets

from conftest import random_spd


# -- construction ---------------------------------------------------------------


def test_from_triplets_identity():
    A = from_triplets(2, [(0, 0, 1.0), (1, 1, 1.0)])
    np.testing.assert_array_equal(A.to_dense(), np.eye(2))


def test_from_triplets_symmetric_pattern():
    A = from_triplets(3, [(0, 1, 0.5), (1, 0, 0.5), (0, 0, 1), (1, 1, 1), (2, 2, 1)])
    assert A.nnz == 5
    assert A.nnz_lower == 4
    np.testing.assert_array_equal(A.to_dense(), A.to_dense().T)


def test_from_triplets_sums_duplicates():
    A = from_triplets(1, [(0, 0, 1.0), (0, 0, 2.0)])
    assert A.to_dense()[0, 0] == 3.0


def test_from_triplets_mirrors_one_triangle():
    A = from_triplets(2, [(1, 0, 2.0), (0, 0, 1.0), (1, 1, 5.0)])
    np.testing.assert_array_equal(A.to_dense(), [[1, 2], [2, 5]])


def test_from_triplets_errors():
    with pytest.raises(IndexError):
        from_triplets(2, [(0, 2, 1.0)])
    with pytest.raises(ValueError, match="asymmetric"):
        from_triplets(2, [(0, 1, 1.0), (1, 0, 2.0)])


def test_from_triplets_inserts_missing_diagonal():
    A = from_triplets(3, [(0, 0, 1.0)])
    assert A.nnz == 3
    np.testing.assert_array_equal(A.diagonal(), [1, 0, 0])


def test_canonical_rows_sorted(rng):
    A, _ = random_spd(30, 0.2, rng)
    for j in range(A.n):
        rows, _ = A.column(j)
        assert np.all(np.diff(rows) > 0)
        assert j in rows


def test_permutation_inverse():
    p = Permutation([2, 0, 1])
    np.testing.assert_array_equal(p.inverse[p.forward], np.arange(3))
    with pytest.raises(ValueError):
        Permutation([0, 0, 1])


# -- ordering and symbolic analysis ---------------------------------------------


def arrowhead(n):
    A = np.eye(n) * n
    A[0, :] = A[:, 0] = 1.0
    A[0, 0] = n
    return SparseSymMatrix.from_dense(A)


def tridiagonal(n):
    A = 4 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
    return SparseSymMatrix.from_dense(A)


def test_identity_has_no_fill():
    A = SparseSymMatrix.from_dense(np.eye(7))
    for method in ("natural", "mindegree", "rcm"):
        sym = sps.symbolic_analyze(A, sps.compute_ordering(A, method))
        assert sym.nnz_L == 7
        assert np.all(sym.parent == -1)
        np.testing.assert_array_equal(sym.counts, 1)


def test_arrowhead_fill_depends_on_order():
    n = 12
    A = arrowhead(n)
    nat = sps.symbolic_analyze(A, Permutation.identity(n))
    assert nat.nnz_L == n * (n + 1) // 2
    rev = sps.symbolic_analyze(A, Permutation(np.arange(n)[::-1]))
    assert rev.nnz_L == 2 * n - 1
    md = sps.symbolic_analyze(A, sps.compute_ordering(A, "mindegree"))
    assert md.nnz_L == 2 * n - 1


def test_tridiagonal_tree():
    A = tridiagonal(4)
    sym = sps.symbolic_analyze(A, Permutation.identity(4))
    np.testing.assert_array_equal(sym.parent, [1, 2, 3, -1])
    np.testing.assert_array_equal(sym.counts, [2, 2, 2, 1])
    md = sps.symbolic_analyze(tridiagonal(20), sps.compute_ordering(tridiagonal(20), "mindegree"))
    assert md.nnz_L == 2 * 20 - 1


def test_dense_tree():
    n = 6
    sym = sps.symbolic_analyze(SparseSymMatrix.full(np.ones((n, n))), Permutation.identity(n))
    np.testing.assert_array_equal(sym.parent, [1, 2, 3, 4, 5, -1])
    np.testing.assert_array_equal(sym.counts, n - np.arange(n))


def test_parent_greater_than_child(rng):
    A, _ = random_spd(60, 0.05, rng)
    sym = sps.symbolic_analyze(A)
    j = np.arange(60)
    assert np.all((sym.parent == -1) | (sym.parent > j))


def test_symbolic_count_equals_allocation(rng):
    A, _ = random_spd(80, 0.04, rng)
    sym = sps.symbolic_analyze(A)
    f = sps.ldl_factorize(A, sym)
    assert f.Lx.size + f.n == sym.nnz_L == int(sym.counts.sum())


def test_mindegree_reduces_fill(rng):
    A, _ = random_spd(150, 0.02, rng)
    nat = sps.symbolic_analyze(A, Permutation.identity(150)).nnz_L
    md = sps.symbolic_analyze(A, sps.compute_ordering(A, "mindegree")).nnz_L
    assert md < nat


# -- factorization and solves ---------------------------------------------------


def test_factor_identity():
    f = sps.ldl_factorize(SparseSymMatrix.from_dense(np.eye(4)))
    np.testing.assert_array_equal(f.D, 1.0)
    assert f.Lx.size == 0


def test_factor_2x2_by_hand():
    A = SparseSymMatrix.from_dense(np.array([[4.0, 2.0], [2.0, 3.0]]))
    f = sps.ldl_factorize(A, sps.symbolic_analyze(A, Permutation.identity(2)))
    np.testing.assert_allclose(f.Lx, [0.5])
    np.testing.assert_allclose(f.D, [4.0, 2.0])
    np.testing.assert_allclose(sps.solve(f, np.array([4.0, 2.0])), [1.0, 0.0], atol=1e-15)


@pytest.mark.parametrize("method", ["natural", "mindegree", "rcm"])
def test_factor_random_reconstructs(rng, method):
    A, Ad = random_spd(50, 0.1, rng)
    f = sps.ldl_factorize(A, sps.symbolic_analyze(A, sps.compute_ordering(A, method)))
    assert np.all(f.D > 0)
    assert np.max(np.abs(f.reconstruct() - Ad)) < 1e-10 * np.abs(Ad).max()


def test_not_positive_definite_reports_column():
    A = np.eye(3)
    A[2, 2] = -1.0
    with pytest.raises(sps.NotPositiveDefiniteError) as exc:
        sps.ldl_factorize(SparseSymMatrix.from_dense(A), sps.symbolic_analyze(
            SparseSymMatrix.from_dense(A), Permutation.identity(3)))
    assert exc.value.column == 2


def test_pattern_mismatch_rejected(rng):
    A, _ = random_spd(20, 0.1, rng)
    sym = sps.symbolic_analyze(A)
    with pytest.raises(sps.PatternError):
        sps.ldl_factorize(SparseSymMatrix.from_dense(np.eye(20)), sym)


def test_solve_identity_unit_vector():
    f = sps.ldl_factorize(SparseSymMatrix.from_dense(np.eye(3)))
    np.testing.assert_array_equal(sps.solve(f, ([2], [1.0])), [0, 0, 1])


def test_solve_random(rng):
    A, Ad = random_spd(50, 0.1, rng)
    f = sps.ldl_factorize(A)
    b = rng.standard_normal(50)
    x = sps.solve(f, b)
    np.testing.assert_allclose(x, np.linalg.solve(Ad, b), atol=1e-10)
    assert np.max(np.abs(Ad @ x - b)) < 1e-8 * np.max(np.abs(b))
    np.testing.assert_allclose(sps.solve_dense(f, b), x, atol=1e-12)


def test_sparse_rhs_solve_and_quad(rng):
    A, Ad = random_spd(80, 0.03, rng)
    f = sps.ldl_factorize(A)
    idx = np.array([3, 17, 40])
    val = rng.standard_normal(3)
    b = np.zeros(80)
    b[idx] = val
    x, quad = sps.solve_with_quad(f, (idx, val))
    ref = np.linalg.solve(Ad, b)
    np.testing.assert_allclose(x, ref, atol=1e-12)
    assert abs(quad - b @ ref) < 1e-12 * max(1, abs(quad))
    assert abs(sps.inv_quad(f, (idx, val)) - quad) < 1e-12 * max(1, abs(quad))


def test_logdet():
    assert sps.logdet(sps.ldl_factorize(SparseSymMatrix.from_dense(np.eye(5)))) == 0.0
    f = sps.ldl_factorize(SparseSymMatrix.from_dense(np.diag([2.0, 3.0])))
    assert abs(sps.logdet(f) - np.log(6.0)) < 1e-15


def test_logdet_and_solve_ordering_invariant(rng):
    A, Ad = random_spd(50, 0.1, rng)
    ref = np.linalg.slogdet(Ad)[1]
    b = rng.standard_normal(50)
    for method in ("natural", "mindegree", "rcm"):
        f = sps.ldl_factorize(A, sps.symbolic_analyze(A, sps.compute_ordering(A, method)))
        assert abs(sps.logdet(f) - ref) < 1e-10 * abs(ref)
        np.testing.assert_allclose(sps.solve(f, b), np.linalg.solve(Ad, b), atol=1e-10)


def test_cholesky_factor_conversion(rng):
    A, Ad = random_spd(30, 0.2, rng)
    f = sps.ldl_factorize(A)
    C = f.cholesky_factor().toarray()
    p = f.perm.forward
    np.testing.assert_allclose(C @ C.T, Ad[np.ix_(p, p)], atol=1e-10)


# -- rank-1 update/downdate ------------------------------------------------------


def test_update_then_same_downdate_is_identity(rng):
    A, _ = random_spd(30, 0.1, rng)
    f = sps.ldl_factorize(A)
    L0, D0 = f.Lx.copy(), f.D.copy()
    # a column of L is supported on a single tree path
    j = int(np.argmax(np.diff(f.symbolic.Lp)))
    rows = f.symbolic.perm.forward[np.r_[j, f.symbolic.Li[f.symbolic.Lp[j]:f.symbolic.Lp[j + 1]]]]
    w = (rows, rng.standard_normal(rows.size))
    sps.rank1_update_downdate(f, w, w)
    np.testing.assert_allclose(f.Lx, L0, atol=1e-12)
    np.testing.assert_allclose(f.D, D0, rtol=1e-12)


def test_update_identity_e1():
    f = sps.ldl_factorize(SparseSymMatrix.from_dense(np.eye(3)))
    sps.rank1_update_downdate(f, ([0], [1.0]), None)
    np.testing.assert_allclose(f.D, [2.0, 1.0, 1.0])


def test_update_downdate_random_dense(rng):
    n = 30
    A, Ad = random_spd(n, 1.0, rng, diag_boost=5.0)
    f = sps.ldl_factorize(A)
    w1 = rng.standard_normal(n)
    w2 = 0.3 * rng.standard_normal(n)
    sps.rank1_update_downdate(f, w1, w2)
    target = Ad + np.outer(w1, w1) - np.outer(w2, w2)
    fresh = sps.ldl_factorize(SparseSymMatrix.full(target), f.symbolic)
    assert np.max(np.abs(f.Lx - fresh.Lx)) < 1e-9
    assert np.max(np.abs(f.D - fresh.D)) < 1e-9


def test_indefinite_downdate_raises():
    f = sps.ldl_factorize(SparseSymMatrix.from_dense(np.eye(2)))
    with pytest.raises(sps.RowModifyError, match="indefinite"):
        sps.rank1_update_downdate(f, None, ([0], [2.0]))


def test_update_off_path_rejected():
    f = sps.ldl_factorize(SparseSymMatrix.from_dense(np.eye(3)))
    with pytest.raises(sps.PatternError):
        sps.rank1_update_downdate(f, ([0, 1], [1.0, 1.0]), None)


# -- row modification ---------------------------------------------------------


def modified(Ad, mask, i, rng):
    """Copy of Ad with row/column i replaced inside the pattern, kept SPD."""
    B = Ad.copy()
    nz = np.flatnonzero(mask[:, i])
    vals = rng.uniform(-1, 1, nz.size)
    B[nz, i] = vals
    B[i, nz] = vals
    B[i, i] = np.abs(vals).sum() + 1.0 + rng.random()
    return B


def test_row_modify_same_row_is_noop(rng):
    A, Ad = random_spd(40, 0.1, rng)
    f = sps.ldl_factorize(A)
    L0, D0 = f.Lx.copy(), f.D.copy()
    sps.ldl_row_modify(f, A.column(10), 10)
    np.testing.assert_allclose(f.Lx, L0, atol=1e-12)
    np.testing.assert_allclose(f.D, D0, rtol=1e-12)


@pytest.mark.parametrize("perm", ["natural", "mindegree"])
def test_row_modify_matches_fresh(rng, perm):
    n = 40
    A, Ad = random_spd(n, 0.1, rng, diag_boost=3.0)
    mask = Ad != 0
    sym = sps.symbolic_analyze(A, sps.compute_ordering(A, perm))
    f = sps.ldl_factorize(A, sym)
    for i in (10, n - 1, 0, int(sym.perm.forward[-1])):
        Ad = modified(Ad, mask, i, rng)
        new = SparseSymMatrix.from_dense(Ad, keep_pattern=mask)
        sps.ldl_row_modify(f, new.column(i), i)
        fresh = sps.ldl_factorize(new, sym)
        assert np.max(np.abs(f.Lx - fresh.Lx)) < 1e-9
        assert np.max(np.abs(f.D - fresh.D)) < 1e-9
        assert np.max(np.abs(f.reconstruct() - Ad)) < 1e-9 * np.abs(Ad).max()


def test_row_modify_first_visit_from_identity_row(rng):
    # a row that is e_i in the current matrix gains its full pattern
    n = 30
    A, Ad = random_spd(n, 0.15, rng, diag_boost=3.0)
    mask = Ad != 0
    B = Ad.copy()
    B[5, :] = B[:, 5] = 0.0
    B[5, 5] = 1.0
    sym = sps.symbolic_analyze(A)
    f = sps.ldl_factorize(SparseSymMatrix.from_dense(B, keep_pattern=mask), sym)
    nnz_before = f.Lx.size
    sps.ldl_row_modify(f, A.column(5), 5)
    assert f.Lx.size == nnz_before
    assert np.max(np.abs(f.reconstruct() - Ad)) < 1e-9 * np.abs(Ad).max()


def test_row_modify_equals_delete_then_add(rng):
    # deleting row i (making it e_i) then adding the new row gives the same factor
    n = 25
    A, Ad = random_spd(n, 0.2, rng, diag_boost=3.0)
    mask = Ad != 0
    sym = sps.symbolic_analyze(A)
    i = 7
    target = modified(Ad, mask, i, rng)
    tgt = SparseSymMatrix.from_dense(target, keep_pattern=mask)
    direct = sps.ldl_factorize(A, sym)
    sps.ldl_row_modify(direct, tgt.column(i), i)
    two = sps.ldl_factorize(A, sym)
    sps.ldl_row_modify(two, ([i], [1.0]), i)
    sps.ldl_row_modify(two, tgt.column(i), i)
    np.testing.assert_allclose(two.Lx, direct.Lx, atol=1e-10)
    np.testing.assert_allclose(two.D, direct.D, atol=1e-10)


@pytest.mark.parametrize("perm", ["natural", "mindegree"])
def test_fused_row_modify_solve_matches_two_step(rng, perm):
    # one pass must equal row_modify followed by forward_pair
    n = 60
    A, Ad = random_spd(n, 0.08, rng, diag_boost=3.0)
    mask = Ad != 0
    s = sps.symbolic_analyze(A, sps.compute_ordering(A, perm))
    a = sps.ldl_factorize(A, s)
    b = sps.ldl_factorize(A, s)
    v = rng.standard_normal(n)
    va = v.copy()
    vb = v.copy()
    for i in rng.integers(0, n, 15):
        Ad = modified(Ad, mask, int(i), rng)
        idx, val = SparseSymMatrix.from_dense(Ad, keep_pattern=mask).column(int(i))
        k = int(s.perm.inverse[i])
        c_idx = s.perm.inverse[idx].astype(np.int64)
        idx2 = s.perm.inverse[A.column(int(rng.integers(n)))[0]].astype(np.int64)
        val2 = rng.standard_normal(idx2.size)
        Ra = np.zeros(n)
        Ra[c_idx] = rng.standard_normal(c_idx.size)
        Rb = Ra.copy()
        assert _kernels.row_modify(n, s.Ap, s.Ai, s.Lp, s.Li, a.Lx, a.D, s.parent, k, c_idx, val,
                                   va, Ra) == _kernels.OK
        qa, da = _kernels.forward_pair(n, s.Lp, s.Li, a.Lx, a.D, s.parent, c_idx, Ra, va, idx2, val2)
        status, qb, db = _kernels.row_modify_solve(n, s.Ap, s.Ai, s.Lp, s.Li, b.Lx, b.D, s.parent, k,
                                                   c_idx, val, vb, Rb, idx2, val2)
        assert status == _kernels.OK
        np.testing.assert_allclose(b.Lx, a.Lx, rtol=0, atol=1e-12)
        np.testing.assert_allclose(b.D, a.D, rtol=1e-12)
        np.testing.assert_allclose(vb, va, rtol=0, atol=1e-10)
        assert not Rb.any() and not Ra.any()
        assert abs(qa - qb) < 1e-10 * max(1.0, abs(qa)) and abs(da - db) < 1e-10 * max(1.0, abs(da))


def test_row_modify_pattern_violation():
    A = tridiagonal(8)
    f = sps.ldl_factorize(A, sps.symbolic_analyze(A, Permutation.identity(8)))
    L0 = f.Lx.copy()
    for i, other in ((0, 5), (5, 0)):
        with pytest.raises(sps.PatternError):
            sps.ldl_row_modify(f, ([i, other], [5.0, 0.1]), i)
    np.testing.assert_array_equal(f.Lx, L0)


def test_row_modify_indefinite_raises():
    A = SparseSymMatrix.from_dense(np.array([[2.0, 1.0], [1.0, 2.0]]))
    f = sps.ldl_factorize(A)
    with pytest.raises(sps.RowModifyError):
        sps.ldl_row_modify(f, ([0, 1], [1.0, 0.1]), 1)


# -- selected inverse --------------------------------------------------------------


def test_takahashi_diagonal():
    f = sps.ldl_factorize(SparseSymMatrix.from_dense(np.diag([2.0, 4.0])))
    np.testing.assert_allclose(sps.takahashi_sparse_inverse(f).to_dense(), np.diag([0.5, 0.25]))


def test_takahashi_2x2():
    f = sps.ldl_factorize(SparseSymMatrix.from_dense(np.array([[4.0, 2.0], [2.0, 3.0]])))
    Z = sps.takahashi_sparse_inverse(f).to_dense()
    np.testing.assert_allclose(Z, [[0.375, -0.25], [-0.25, 0.5]], atol=1e-15)


def test_takahashi_random(rng):
    A, Ad = random_spd(100, 0.03, rng)
    f = sps.ldl_factorize(A)
    inv = np.linalg.inv(Ad)
    z = sps.selected_inverse(f).on_pattern(A)
    ref = inv[A.indices, A.col_index()]
    assert np.max(np.abs(z - ref)) < 1e-8
    # the fill pattern of L holds exact inverse entries too
    Z = sps.takahashi_sparse_inverse(f)
    np.testing.assert_allclose(Z.data, inv[Z.indices, Z.col_index()], atol=1e-8)


def test_selected_inverse_outside_pattern_is_nan():
    f = sps.ldl_factorize(SparseSymMatrix.from_dense(np.eye(3)))
    assert np.isnan(sps.selected_inverse(f).gather(np.array([0]), np.array([1])))[0]


# -- MatrixMarket -----------------------------------------------------------------


def test_matrix_market_roundtrip(tmp_path, rng):
    A, Ad = random_spd(25, 0.1, rng)
    path = tmp_path / "a.mtx"
    sps.write_matrix_market(path, A, comment="test")
    text = path.read_text()
    assert "symmetric" in text.splitlines()[0]
    B = sps.read_matrix_market(path)
    np.testing.assert_array_equal(B.indptr, A.indptr)
    np.testing.assert_array_equal(B.indices, A.indices)
    np.testing.assert_allclose(B.data, A.data, rtol=1e-15)
