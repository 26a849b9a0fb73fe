"""Compiled inner loops for the sparse LDL machinery.

All routines work on the *permuted* matrix.  Symmetric matrices are passed
as full (both triangles) CSC arrays ``Ap, Ai, Ax``.  The unit lower
triangular factor is stored strictly below the diagonal as ``Lp, Li, Lx``
with row indices sorted within each column; ``D`` holds the diagonal.

Status codes: ``-1`` means success, a non-negative value is the column at
which a non-positive pivot appeared, ``-2`` flags a pattern violation.
"""

import numpy as np
from numba import int64, njit, uint64

OK = -1
PATTERN_ERROR = -2

# reassociation lets the column loops vectorize; no assumptions about NaN/inf
_FAST = {"reassoc", "contract", "nsz"}

# Hot loops index with unsigned integers so that no negative-index
# wraparound code is emitted.  A column holding every row below its diagonal
# is walked contiguously, which keeps the dense trailing block vectorized.


@njit(cache=True, fastmath=_FAST)
def _scatter_column(n, j, Lp, Li, Lx, x, xj):
    """x[rows of column j] -= L[:, j] * xj."""
    p0 = uint64(Lp[j])
    p1 = uint64(Lp[j + 1])
    if p1 - p0 == uint64(n - 1 - j):
        base = uint64(j + 1)
        for q in range(p1 - p0):
            x[base + q] -= Lx[p0 + q] * xj
    else:
        for p in range(p0, p1):
            x[uint64(Li[p])] -= Lx[p] * xj


@njit(cache=True, fastmath=_FAST)
def _scatter_two(n, j, Lp, Li, Lx, x, xj, y, yj):
    """Two column scatters sharing one read of column j."""
    p0 = uint64(Lp[j])
    p1 = uint64(Lp[j + 1])
    if p1 - p0 == uint64(n - 1 - j):
        base = uint64(j + 1)
        for q in range(p1 - p0):
            lv = Lx[p0 + q]
            x[base + q] -= lv * xj
            y[base + q] -= lv * yj
    else:
        for p in range(p0, p1):
            r = uint64(Li[p])
            lv = Lx[p]
            x[r] -= lv * xj
            y[r] -= lv * yj


@njit(cache=True, fastmath=_FAST)
def _gather_column(n, j, Lp, Li, Lx, x):
    """L[:, j]' x."""
    p0 = uint64(Lp[j])
    p1 = uint64(Lp[j + 1])
    s = 0.0
    if p1 - p0 == uint64(n - 1 - j):
        base = uint64(j + 1)
        for q in range(p1 - p0):
            s += Lx[p0 + q] * x[base + q]
    else:
        for p in range(p0, p1):
            s += Lx[p] * x[uint64(Li[p])]
    return s


@njit(cache=True)
def symbolic(n, Ap, Ai):
    """Elimination tree, column counts and row pattern of L."""
    parent = np.full(n, -1, dtype=np.int64)
    flag = np.full(n, -1, dtype=np.int64)
    lnz = np.zeros(n, dtype=np.int64)
    for k in range(n):
        flag[k] = k
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            if i < k:
                while flag[i] != k:
                    if parent[i] == -1:
                        parent[i] = k
                    lnz[i] += 1
                    flag[i] = k
                    i = parent[i]
    Lp = np.zeros(n + 1, dtype=np.int64)
    for k in range(n):
        Lp[k + 1] = Lp[k] + lnz[k]
    # second pass fills the row indices; rows arrive in increasing k
    Li = np.empty(Lp[n], dtype=np.int64)
    nxt = Lp[:-1].copy()
    flag[:] = -1
    for k in range(n):
        flag[k] = k
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            if i < k:
                while flag[i] != k:
                    Li[nxt[i]] = k
                    nxt[i] += 1
                    flag[i] = k
                    i = parent[i]
    return parent, lnz, Lp, Li


@njit(cache=True)
def numeric(n, Ap, Ai, Ax, Lp, Li, parent, Lx, D):
    """Up-looking LDL' factorization into a preallocated pattern."""
    Y = np.zeros(n)
    flag = np.full(n, -1, dtype=np.int64)
    pattern = np.empty(n, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    nxt = Lp[:-1].copy()
    for k in range(n):
        top = n
        flag[k] = k
        Y[k] = 0.0
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            if i <= k:
                Y[i] += Ax[p]
                length = 0
                while flag[i] != k:
                    stack[length] = i
                    length += 1
                    flag[i] = k
                    i = parent[i]
                while length > 0:
                    top -= 1
                    length -= 1
                    pattern[top] = stack[length]
        dk = Y[k]
        Y[k] = 0.0
        for t in range(top, n):
            i = pattern[t]
            yi = Y[i]
            Y[i] = 0.0
            p2 = nxt[i]
            for p in range(Lp[i], p2):
                Y[Li[p]] -= Lx[p] * yi
            lki = yi / D[i]
            dk -= lki * yi
            Lx[p2] = lki
            nxt[i] = p2 + 1
        if not dk > 0.0:
            return k
        D[k] = dk
    return OK


@njit(cache=True)
def _reach(n, parent, idx, flag, stamp):
    """Sorted union of elimination-tree paths from ``idx`` to their roots."""
    lo = n
    m = 0
    for q in range(idx.shape[0]):
        i = idx[q]
        if i < lo:
            lo = i
        while i != -1 and flag[i] != stamp:
            flag[i] = stamp
            m += 1
            i = parent[i]
    # paths only climb, so a scan upward from the lowest start is sorted
    res = np.empty(m, dtype=np.int64)
    m = 0
    for j in range(lo, n):
        if flag[j] == stamp:
            res[m] = j
            m += 1
    return res


@njit(cache=True)
def solve_dense(n, Lp, Li, Lx, D, x):
    """In-place solve of L D L' x = b for a dense permuted right-hand side."""
    for j in range(n):
        xj = x[j]
        if xj != 0.0:
            _scatter_column(n, j, Lp, Li, Lx, x, xj)
    for j in range(n):
        x[j] /= D[j]
    for j in range(n - 1, -1, -1):
        x[j] -= _gather_column(n, j, Lp, Li, Lx, x)


@njit(cache=True)
def solve_sparse(n, Lp, Li, Lx, D, parent, idx, val):
    """Solve with a sparse permuted right-hand side.

    The forward sweep only visits the elimination-tree reach of ``idx``.
    Returns the dense solution together with b' (L D L')^-1 b, which falls
    out of the forward half for free.
    """
    x = np.zeros(n)
    for q in range(idx.shape[0]):
        x[idx[q]] += val[q]
    flag = np.full(n, -1, dtype=np.int64)
    reach = _reach(n, parent, idx, flag, 0)
    for t in range(reach.shape[0]):
        j = reach[t]
        xj = x[j]
        if xj != 0.0:
            _scatter_column(n, j, Lp, Li, Lx, x, xj)
    quad = 0.0
    for t in range(reach.shape[0]):
        j = reach[t]
        quad += x[j] * x[j] / D[j]
        x[j] /= D[j]
    for j in range(n - 1, -1, -1):
        x[j] -= _gather_column(n, j, Lp, Li, Lx, x)
    return x, quad


@njit(cache=True)
def forward_quad(n, Lp, Li, Lx, D, parent, idx, val):
    """b' (L D L')^-1 b using only the forward sweep over the reach of b."""
    x = np.zeros(n)
    for q in range(idx.shape[0]):
        x[idx[q]] += val[q]
    flag = np.full(n, -1, dtype=np.int64)
    reach = _reach(n, parent, idx, flag, 0)
    quad = 0.0
    for t in range(reach.shape[0]):
        j = reach[t]
        xj = x[j]
        if xj != 0.0:
            _scatter_column(n, j, Lp, Li, Lx, x, xj)
            quad += xj * xj / D[j]
    return quad


@njit(cache=True)
def forward_quad_dot(n, Lp, Li, Lx, D, parent, idx, val, v):
    """Forward sweep of b over its reach: ``b' A^-1 b`` and ``b' A^-1 P' L v``.

    With ``v = L^-1 c`` the second value is ``b' A^-1 c``.
    """
    x = np.zeros(n)
    for q in range(idx.shape[0]):
        x[idx[q]] += val[q]
    flag = np.full(n, -1, dtype=np.int64)
    reach = _reach(n, parent, idx, flag, 0)
    quad = 0.0
    dot = 0.0
    for t in range(reach.shape[0]):
        j = reach[t]
        xj = x[j]
        if xj != 0.0:
            _scatter_column(n, j, Lp, Li, Lx, x, xj)
            quad += xj * xj / D[j]
            dot += xj * v[j] / D[j]
    return quad, dot


@njit(cache=True)
def forward_reach_accumulate(n, Lp, Li, Lx, parent, idx, R, v):
    """``v += L^-1 R`` for R supported on the reach of ``idx``; clears R."""
    flag = np.full(n, -1, dtype=np.int64)
    reach = _reach(n, parent, idx, flag, 0)
    for t in range(reach.shape[0]):
        j = reach[t]
        xj = R[j]
        if xj != 0.0:
            _scatter_column(n, j, Lp, Li, Lx, R, xj)
    for t in range(reach.shape[0]):
        j = reach[t]
        v[j] += R[j]
        R[j] = 0.0


@njit(cache=True)
def forward_pair(n, Lp, Li, Lx, D, parent, idx, R, v, idx2, val2):
    """:func:`forward_reach_accumulate` fused with :func:`forward_quad_dot`.

    ``v += L^-1 R`` over the reach of ``idx`` (R cleared), and the quad and
    dot values of ``b2 = (idx2, val2)`` against the updated v, in one pass
    over the union of both reaches.
    """
    x = np.zeros(n)
    for q in range(idx2.shape[0]):
        x[idx2[q]] += val2[q]
    flag = np.full(n, -1, dtype=np.int64)
    reach = _reach(n, parent, np.concatenate((idx, idx2)), flag, 0)
    quad = 0.0
    dot = 0.0
    for t in range(reach.shape[0]):
        j = reach[t]
        dj = R[j]
        xj = x[j]
        if dj != 0.0:
            v[j] += dj
            if xj != 0.0:
                _scatter_two(n, j, Lp, Li, Lx, R, dj, x, xj)
            else:
                _scatter_column(n, j, Lp, Li, Lx, R, dj)
        elif xj != 0.0:
            _scatter_column(n, j, Lp, Li, Lx, x, xj)
        if xj != 0.0:
            quad += xj * xj / D[j]
            dot += xj * v[j] / D[j]
    for t in range(reach.shape[0]):
        R[reach[t]] = 0.0
    return quad, dot


@njit(cache=True)
def forward_dense(n, Lp, Li, Lx, x):
    """In-place ``x <- L^-1 x``."""
    for j in range(n):
        xj = x[j]
        if xj != 0.0:
            _scatter_column(n, j, Lp, Li, Lx, x, xj)


@njit(cache=True, fastmath=_FAST)
def _updown_column(n, j, Lp, Li, Lx, D, W1, W2, a, R, vj):
    """One column of the fused rank-1 update (W1) and downdate (W2).

    ``a`` holds the two running alphas and is modified in place.  The change
    of every entry of the column, times ``vj``, is subtracted from ``R``.
    Returns False if the downdate produced a non-positive pivot.
    """
    p1 = W1[j]
    p2 = W2[j]
    if p1 == 0.0 and p2 == 0.0:
        return True
    d = D[j]
    a1 = a[0]
    a2 = a[1]
    d1 = d + a1 * p1 * p1
    b1 = p1 * a1 / d1
    a1 = d * a1 / d1
    d2 = d1 + a2 * p2 * p2
    if not d2 > 0.0:
        return False
    b2 = p2 * a2 / d2
    a2 = d1 * a2 / d2
    a[0] = a1
    a[1] = a2
    D[j] = d2
    p0 = uint64(Lp[j])
    pend = uint64(Lp[j + 1])
    if pend - p0 == uint64(n - 1 - j):
        base = uint64(j + 1)
        for q in range(pend - p0):
            r = base + q
            p = p0 + q
            old = Lx[p]
            w1 = W1[r] - p1 * old
            lv = old + b1 * w1
            w2 = W2[r] - p2 * lv
            lv += b2 * w2
            W1[r] = w1
            W2[r] = w2
            Lx[p] = lv
            R[r] -= (lv - old) * vj
    else:
        for p in range(p0, pend):
            r = uint64(Li[p])
            old = Lx[p]
            w1 = W1[r] - p1 * old
            lv = old + b1 * w1
            w2 = W2[r] - p2 * lv
            lv += b2 * w2
            W1[r] = w1
            W2[r] = w2
            Lx[p] = lv
            R[r] -= (lv - old) * vj
    return True


@njit(cache=True)
def update_downdate(n, Lp, Li, Lx, D, parent, W1, W2):
    """L D L' + w1 w1' - w2 w2' on a fixed pattern; W1, W2 are dense, permuted.

    Both vectors must be supported on elimination-tree paths so that the
    pattern of L is closed under the modification.
    """
    cnt = 0
    for i in range(n):
        if W1[i] != 0.0 or W2[i] != 0.0:
            cnt += 1
    idx = np.empty(cnt, dtype=np.int64)
    cnt = 0
    for i in range(n):
        if W1[i] != 0.0 or W2[i] != 0.0:
            idx[cnt] = i
            cnt += 1
    flag = np.full(n, -1, dtype=np.int64)
    cols = _reach(n, parent, idx, flag, 0)
    a = np.array([1.0, -1.0])
    R = np.zeros(n)
    for t in range(cols.shape[0]):
        if not _updown_column(n, cols[t], Lp, Li, Lx, D, W1, W2, a, R, 0.0):
            return cols[t]
    return OK


@njit(cache=True)
def path_closed(n, Lp, Li, parent, idx):
    """True if every index in ``idx`` lies on the root path of the smallest."""
    if idx.shape[0] == 0:
        return True
    flag = np.zeros(n, dtype=np.bool_)
    j = idx.min()
    while j != -1:
        flag[j] = True
        j = parent[j]
    for q in range(idx.shape[0]):
        if not flag[idx[q]]:
            return False
    return True


@njit(cache=True, fastmath=_FAST)
def _row_solve_column(n, i, k, Lp, Li, Lx, Y, W2, yi):
    """Scatter column i of L times yi: rows above k into Y, below into W2.

    Returns the position of row k in the column, or -1 if it is absent.
    """
    p0 = uint64(Lp[i])
    pend = uint64(Lp[i + 1])
    if pend - p0 == uint64(n - 1 - i):
        base = uint64(i + 1)
        pk = p0 + uint64(k - i - 1)
        for q in range(pk - p0):
            Y[base + q] -= Lx[p0 + q] * yi
        below = uint64(k + 1)
        for q in range(pend - pk - uint64(1)):
            W2[below + q] -= Lx[pk + uint64(1) + q] * yi
        return int64(pk)
    p = p0
    while p < pend and Li[p] < k:
        Y[uint64(Li[p])] -= Lx[p] * yi
        p += uint64(1)
    if p == pend or Li[p] != k:
        return -1
    for p2 in range(p + uint64(1), pend):
        W2[uint64(Li[p2])] -= Lx[p2] * yi
    return int64(p)


@njit(cache=True)
def row_modify(n, Ap, Ai, Lp, Li, Lx, D, parent, k, c_idx, c_val, v, R):
    """Replace row/column ``k`` of the factored matrix by ``c`` (permuted).

    Row k of L is recomputed by a sparse triangular solve over the frozen row
    pattern, column k from the trailing block product, and the trailing
    factor by a fused update/downdate along the path from parent(k).

    For a tracked vector ``v`` the product ``(L_old - L_new) v`` is added to
    ``R`` (pass zeros to ignore); it lies on the reach of row k.
    """
    Y = np.zeros(n)
    W1 = np.zeros(n)
    W2 = np.zeros(n)
    flag = np.full(n, -1, dtype=np.int64)
    pattern = np.empty(n, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)

    b22 = 0.0
    for q in range(c_idx.shape[0]):
        r = c_idx[q]
        if r < k:
            Y[r] += c_val[q]
        elif r == k:
            b22 += c_val[q]
        else:
            W2[r] += c_val[q]

    # frozen row pattern of L: reach of the stored row k of the matrix
    top = n
    flag[k] = k
    for p in range(Ap[k], Ap[k + 1]):
        i = Ai[p]
        if i < k:
            length = 0
            while flag[i] != k:
                stack[length] = i
                length += 1
                flag[i] = k
                i = parent[i]
            while length > 0:
                top -= 1
                length -= 1
                pattern[top] = stack[length]
    for p in range(Lp[k], Lp[k + 1]):
        flag[Li[p]] = k
    for q in range(c_idx.shape[0]):
        r = c_idx[q]
        if r != k and flag[r] != k:
            return PATTERN_ERROR

    # L11 D11 l12 = b12, then d22 and the product L31 D11 l12
    dbar = b22
    for t in range(top, n):
        i = pattern[t]
        yi = Y[i]
        Y[i] = 0.0
        p = _row_solve_column(n, i, k, Lp, Li, Lx, Y, W2, yi)
        if p < 0:
            return PATTERN_ERROR
        lki = yi / D[i]
        dbar -= lki * yi
        R[k] -= (lki - Lx[p]) * v[i]
        Lx[p] = lki
    if not dbar > 0.0:
        return k

    sd_old = np.sqrt(D[k])
    sd_new = np.sqrt(dbar)
    vk = v[k]
    for p in range(Lp[k], Lp[k + 1]):
        r = Li[p]
        W1[r] = Lx[p] * sd_old
        lnew = W2[r] / dbar
        R[r] -= (lnew - Lx[p]) * vk
        Lx[p] = lnew
        W2[r] = lnew * sd_new
    D[k] = dbar

    a = np.array([1.0, -1.0])
    j = parent[k]
    while j != -1:
        if not _updown_column(n, j, Lp, Li, Lx, D, W1, W2, a, R, v[j]):
            return j
        j = parent[j]
    return OK


@njit(cache=True, fastmath=_FAST)
def _updown_solve_column(n, j, Lp, Li, Lx, D, W1, W2, a, R, vj, dj, x, xj):
    """:func:`_updown_column` followed by the solve scatters of the new column.

    ``R`` receives both the change of the column times ``vj`` and the new
    column times ``dj``; ``x`` receives the new column times ``xj``.
    """
    p1 = W1[j]
    p2 = W2[j]
    b1 = 0.0
    b2 = 0.0
    if p1 != 0.0 or p2 != 0.0:
        d = D[j]
        a1 = a[0]
        a2 = a[1]
        d1 = d + a1 * p1 * p1
        b1 = p1 * a1 / d1
        a1 = d * a1 / d1
        d2 = d1 + a2 * p2 * p2
        if not d2 > 0.0:
            return False
        b2 = p2 * a2 / d2
        a2 = d1 * a2 / d2
        a[0] = a1
        a[1] = a2
        D[j] = d2
    p0 = uint64(Lp[j])
    pend = uint64(Lp[j + 1])
    if pend - p0 == uint64(n - 1 - j):
        base = uint64(j + 1)
        for q in range(pend - p0):
            r = base + q
            p = p0 + q
            old = Lx[p]
            w1 = W1[r] - p1 * old
            lv = old + b1 * w1
            w2 = W2[r] - p2 * lv
            lv += b2 * w2
            W1[r] = w1
            W2[r] = w2
            Lx[p] = lv
            R[r] -= (lv - old) * vj + lv * dj
            x[r] -= lv * xj
    else:
        for p in range(p0, pend):
            r = uint64(Li[p])
            old = Lx[p]
            w1 = W1[r] - p1 * old
            lv = old + b1 * w1
            w2 = W2[r] - p2 * lv
            lv += b2 * w2
            W1[r] = w1
            W2[r] = w2
            Lx[p] = lv
            R[r] -= (lv - old) * vj + lv * dj
            x[r] -= lv * xj
    return True


@njit(cache=True, fastmath=_FAST)
def _row_solve_scatter(n, i, k, Lp, Li, Lx, Y, W2, yi, R, di, x, xi, lki):
    """Row-solve step at column i fused with the solve scatters.

    Rows above k take ``yi`` into Y, rows below k into W2; every row takes
    ``di`` into R and ``xi`` into x using the new entry ``lki`` at row k.
    Returns the position of row k, or -1 if it is absent.
    """
    p0 = uint64(Lp[i])
    pend = uint64(Lp[i + 1])
    if pend - p0 == uint64(n - 1 - i):
        base = uint64(i + 1)
        pk = p0 + uint64(k - i - 1)
        for q in range(pk - p0):
            lv = Lx[p0 + q]
            Y[base + q] -= lv * yi
            R[base + q] -= lv * di
            x[base + q] -= lv * xi
        below = uint64(k + 1)
        start = pk + uint64(1)
        for q in range(pend - start):
            lv = Lx[start + q]
            W2[below + q] -= lv * yi
            R[below + q] -= lv * di
            x[below + q] -= lv * xi
    else:
        p = p0
        while p < pend and Li[p] < k:
            r = uint64(Li[p])
            lv = Lx[p]
            Y[r] -= lv * yi
            R[r] -= lv * di
            x[r] -= lv * xi
            p += uint64(1)
        if p == pend or Li[p] != k:
            return -1
        pk = p
        for p2 in range(pk + uint64(1), pend):
            r = uint64(Li[p2])
            lv = Lx[p2]
            W2[r] -= lv * yi
            R[r] -= lv * di
            x[r] -= lv * xi
    R[k] -= lki * di
    x[k] -= lki * xi
    return int64(pk)


@njit(cache=True)
def row_modify_solve(n, Ap, Ai, Lp, Li, Lx, D, parent, k, c_idx, c_val, v, R, idx2, val2):
    """:func:`row_modify` fused with the solves that follow it.

    After replacing row/column ``k`` by ``c`` this also performs
    ``v += L_new^-1 (R + (L_old - L_new) v)`` (R cleared) and returns the
    quad and dot terms of ``b2 = (idx2, val2)`` against the new v, as
    :func:`forward_pair` would on the modified factor.  Every column of L is
    read once: the row solve, the path update/downdate and both forward
    solves share a single pass in increasing column order.

    Returns ``(status, quad, dot)``.  On a failed pivot the factor, ``v``
    and ``R`` are left partially updated and must be rebuilt.
    """
    Y = np.zeros(n)
    W1 = np.zeros(n)
    W2 = np.zeros(n)
    x = np.zeros(n)
    flag = np.full(n, -1, dtype=np.int64)
    role = np.zeros(n, dtype=np.int8)  # 1 row pattern of k, 2 path above k

    b22 = 0.0
    for q in range(c_idx.shape[0]):
        r = c_idx[q]
        if r < k:
            Y[r] += c_val[q]
        elif r == k:
            b22 += c_val[q]
        else:
            W2[r] += c_val[q]
    for q in range(idx2.shape[0]):
        x[idx2[q]] += val2[q]

    # frozen row pattern of L, then the path from k to the root
    for p in range(Ap[k], Ap[k + 1]):
        i = Ai[p]
        while i < k and role[i] == 0:
            role[i] = 1
            i = parent[i]
    j = parent[k]
    while j != -1:
        role[j] = 2
        j = parent[j]
    for q in range(c_idx.shape[0]):
        r = c_idx[q]
        if r < k and role[r] != 1:
            return PATTERN_ERROR, 0.0, 0.0
        if r > k and role[r] != 2:
            return PATTERN_ERROR, 0.0, 0.0
    for p in range(Lp[k], Lp[k + 1]):
        flag[Li[p]] = k
    for q in range(c_idx.shape[0]):
        r = c_idx[q]
        if r > k and flag[r] != k:
            return PATTERN_ERROR, 0.0, 0.0

    seeds = np.empty(Ap[k + 1] - Ap[k] + idx2.shape[0], dtype=np.int64)
    m = 0
    for p in range(Ap[k], Ap[k + 1]):
        seeds[m] = Ai[p]
        m += 1
    for q in range(idx2.shape[0]):
        seeds[m] = idx2[q]
        m += 1
    flag[:] = -1
    reach = _reach(n, parent, seeds, flag, 0)

    a = np.array([1.0, -1.0])
    dbar = b22
    quad = 0.0
    dot = 0.0
    for t in range(reach.shape[0]):
        j = reach[t]
        vj = v[j]
        dj = R[j]
        xj = x[j]
        if j < k and role[j] == 1:
            yi = Y[j]
            Y[j] = 0.0
            lki = yi / D[j]
            dbar -= lki * yi
            p = _row_solve_scatter(n, j, k, Lp, Li, Lx, Y, W2, yi, R, dj, x, xj, lki)
            if p < 0:
                return PATTERN_ERROR, 0.0, 0.0
            R[k] -= (lki - Lx[p]) * vj
            Lx[p] = lki
        elif j == k:
            if not dbar > 0.0:
                return k, 0.0, 0.0
            sd_old = np.sqrt(D[k])
            sd_new = np.sqrt(dbar)
            for p in range(Lp[k], Lp[k + 1]):
                r = Li[p]
                old = Lx[p]
                lnew = W2[r] / dbar
                W1[r] = old * sd_old
                W2[r] = lnew * sd_new
                Lx[p] = lnew
                R[r] -= (lnew - old) * vj + lnew * dj
                x[r] -= lnew * xj
            D[k] = dbar
        elif role[j] == 2:
            if not _updown_solve_column(n, j, Lp, Li, Lx, D, W1, W2, a, R, vj, dj, x, xj):
                return j, 0.0, 0.0
        elif dj != 0.0:
            if xj != 0.0:
                _scatter_two(n, j, Lp, Li, Lx, R, dj, x, xj)
            else:
                _scatter_column(n, j, Lp, Li, Lx, R, dj)
        elif xj != 0.0:
            _scatter_column(n, j, Lp, Li, Lx, x, xj)
        v[j] = vj + dj
        if xj != 0.0:
            quad += xj * xj / D[j]
            dot += xj * v[j] / D[j]
    for t in range(reach.shape[0]):
        R[reach[t]] = 0.0
    return OK, quad, dot


@njit(cache=True, fastmath=_FAST)
def _takahashi_dense_pair(kk, q0, p, n, Zx, Lx, acc, lkj):
    """Dense column kk against the contiguous tail of column j below kk."""
    s = 0.0
    base = uint64(kk + 1)
    q0 = uint64(q0)
    p = uint64(p + 1)
    for t in range(uint64(n - 1 - kk)):
        z = Zx[q0 + t]
        acc[base + t] -= z * lkj
        s += z * Lx[p + t]
    return s


@njit(cache=True)
def takahashi(n, Lp, Li, Lx, D):
    """Entries of (L D L')^-1 on the pattern of L, reverse column order.

    The rows of column j below one of its entries kk are a subset of the
    rows of column kk, so a dense column kk is indexed directly instead of
    being scanned.
    """
    Zx = np.zeros(Lx.shape[0])
    Zd = np.zeros(n)
    acc = np.zeros(n)
    lval = np.zeros(n)
    flag = np.full(n, -1, dtype=np.int64)
    for j in range(n - 1, -1, -1):
        p1 = Lp[j + 1]
        for p in range(Lp[j], p1):
            r = Li[p]
            lval[r] = Lx[p]
            flag[r] = j
            acc[r] = 0.0
        for p in range(Lp[j], p1):
            kk = Li[p]
            lkj = Lx[p]
            acc[kk] -= Zd[kk] * lkj
            q0 = Lp[kk]
            q1 = Lp[kk + 1]
            s = 0.0
            if q1 - q0 == n - 1 - kk:
                if p1 - p - 1 == n - 1 - kk:
                    s = _takahashi_dense_pair(kk, q0, p, n, Zx, Lx, acc, lkj)
                else:
                    for pp in range(p + 1, p1):
                        i = Li[pp]
                        z = Zx[q0 + i - kk - 1]
                        acc[i] -= z * lkj
                        s += z * Lx[pp]
            else:
                for q in range(q0, q1):
                    i = Li[q]
                    if flag[i] == j:
                        z = Zx[q]
                        acc[i] -= z * lkj
                        s += z * lval[i]
            acc[kk] -= s
        zjj = 1.0 / D[j]
        for p in range(Lp[j], p1):
            r = Li[p]
            Zx[p] = acc[r]
            zjj -= acc[r] * Lx[p]
        Zd[j] = zjj
    return Zx, Zd


@njit(cache=True)
def lookup_lower(Lp, Li, vals, diag, pinv, rows, cols):
    """Gather entries stored on the L pattern at original (row, col) pairs."""
    m = rows.shape[0]
    out = np.empty(m)
    for q in range(m):
        a = pinv[rows[q]]
        b = pinv[cols[q]]
        if a == b:
            out[q] = diag[a]
            continue
        lo = min(a, b)
        hi = max(a, b)
        s = Lp[lo]
        e = Lp[lo + 1]
        while s < e:
            mid = (s + e) // 2
            if Li[mid] < hi:
                s = mid + 1
            else:
                e = mid
        if s < Lp[lo + 1] and Li[s] == hi:
            out[q] = vals[s]
        else:
            out[q] = np.nan
    return out


@njit(cache=True)
def minimum_degree(n, Ap, Ai):
    """Greedy minimum-degree elimination on an explicit adjacency matrix.

    Ties go to the lowest index.  Memory is O(n^2) bits, so callers should
    only use this at desk scale.
    """
    adj = np.zeros((n, n), dtype=np.bool_)
    deg = np.zeros(n, dtype=np.int64)
    for j in range(n):
        for p in range(Ap[j], Ap[j + 1]):
            i = Ai[p]
            if i != j and not adj[i, j]:
                adj[i, j] = True
                adj[j, i] = True
                deg[i] += 1
                deg[j] += 1
    done = np.zeros(n, dtype=np.bool_)
    perm = np.empty(n, dtype=np.int64)
    nbrs = np.empty(n, dtype=np.int64)
    big = n + 1
    for step in range(n):
        v = -1
        best = big
        for u in range(n):
            if not done[u] and deg[u] < best:
                best = deg[u]
                v = u
        perm[step] = v
        done[v] = True
        m = 0
        for u in range(n):
            if adj[v, u] and not done[u]:
                nbrs[m] = u
                m += 1
                adj[u, v] = False
                deg[u] -= 1
        for x in range(m):
            a = nbrs[x]
            for z in range(x + 1, m):
                b = nbrs[z]
                if not adj[a, b]:
                    adj[a, b] = True
                    adj[b, a] = True
                    deg[a] += 1
                    deg[b] += 1
    return perm
