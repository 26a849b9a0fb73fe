"""Squared exponential and piecewise polynomial covariance functions.

The piecewise polynomial kernels ``pp0`` .. ``pp3`` vanish for scaled
distances ``r >= 1``, so covariance matrices only store pairs closer than
one length-scale unit.  Hyperparameters are handled in log space:
``theta = [log magnitude, log l_1, ..., log l_d]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from numba import njit

from .sparse import SparseSymMatrix

KINDS = ("se", "pp0", "pp1", "pp2", "pp3")
_CODE = {k: c for c, k in enumerate(KINDS)}


@dataclass
class Hyperparams:
    kind: str
    magnitude: float
    length_scales: np.ndarray

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel {self.kind!r}; choose from {KINDS}")
        self.length_scales = np.atleast_1d(np.asarray(self.length_scales, dtype=float)).copy()
        if not self.magnitude > 0:
            raise ValueError("magnitude must be positive")
        if np.any(~(self.length_scales > 0)):
            raise ValueError("length-scales must be positive")

    @property
    def input_dim(self) -> int:
        return self.length_scales.size

    @property
    def q(self) -> int | None:
        return None if self.kind == "se" else int(self.kind[2])

    @property
    def n_params(self) -> int:
        return 1 + self.input_dim

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([[np.log(self.magnitude)], np.log(self.length_scales)])

    @classmethod
    def from_theta(cls, kind: str, theta) -> "Hyperparams":
        theta = np.asarray(theta, dtype=float)
        return cls(kind, float(np.exp(theta[0])), np.exp(theta[1:]))

    def param_names(self) -> list[str]:
        return ["magnitude"] + [f"length_scale_{k}" for k in range(self.input_dim)]


def scaled_distance(xi, xj, length_scales) -> float:
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    xj = np.atleast_1d(np.asarray(xj, dtype=float))
    l = np.broadcast_to(np.asarray(length_scales, dtype=float), xi.shape)
    if xi.shape != xj.shape:
        raise ValueError(f"dimension mismatch: {xi.shape} vs {xj.shape}")
    return float(np.sqrt(np.sum(((xi - xj) / l) ** 2)))


def smoothness_exponent(D: int, q: int) -> int:
    """Truncation power that keeps ``pp_q`` positive definite up to dimension D."""
    return D // 2 + q + 1


@njit(cache=True)
def _pp_poly(q, j, r):
    """Polynomial factor of pp_q and its derivative in r, normalized to 1 at r=0."""
    if q == 0:
        return 1.0, 0.0
    if q == 1:
        return (j + 1.0) * r + 1.0, j + 1.0
    if q == 2:
        a = j * j + 4.0 * j + 3.0
        b = 3.0 * j + 6.0
        return (a * r * r + b * r + 3.0) / 3.0, (2.0 * a * r + b) / 3.0
    a = j ** 3 + 9.0 * j * j + 23.0 * j + 15.0
    b = 6.0 * j * j + 36.0 * j + 45.0
    c = 15.0 * j + 45.0
    return (a * r ** 3 + b * r * r + c * r + 15.0) / 15.0, (3.0 * a * r * r + 2.0 * b * r + c) / 15.0


@njit(cache=True)
def _kappa(code, j, s2, r):
    """Kernel value and d value / d r."""
    if code == 0:
        v = s2 * np.exp(-r * r)
        return v, -2.0 * r * v
    if r >= 1.0:
        return 0.0, 0.0
    q = code - 1
    e = j + q
    u = 1.0 - r
    P, dP = _pp_poly(q, j, r)
    ue = u ** e
    return s2 * ue * P, s2 * (ue * dP - e * u ** (e - 1) * P)


@njit(cache=True)
def _dkappa_over_r(code, j, s2, r):
    """(d value / d r) / r, finite at r = 0 where it is needed."""
    if code == 0:
        return -2.0 * s2 * np.exp(-r * r)
    if r > 0.0:
        return _kappa(code, j, s2, r)[1] / r
    return 0.0


def kernel_value(hyp: Hyperparams, r) -> np.ndarray | float:
    """Covariance as a function of the scaled distance ``r``."""
    j = 0 if hyp.kind == "se" else smoothness_exponent(hyp.input_dim, hyp.q)
    code = _CODE[hyp.kind]
    r_arr = np.asarray(r, dtype=float)
    out = np.array([_kappa(code, j, hyp.magnitude, float(x))[0] for x in r_arr.ravel()])
    return float(out[0]) if r_arr.ndim == 0 else out.reshape(r_arr.shape)


def kernel_derivative_r(hyp: Hyperparams, r) -> np.ndarray | float:
    """d kernel / d r."""
    j = 0 if hyp.kind == "se" else smoothness_exponent(hyp.input_dim, hyp.q)
    code = _CODE[hyp.kind]
    r_arr = np.asarray(r, dtype=float)
    out = np.array([_kappa(code, j, hyp.magnitude, float(x))[1] for x in r_arr.ravel()])
    return float(out[0]) if r_arr.ndim == 0 else out.reshape(r_arr.shape)


def kernel_value_gradients(hyp: Hyperparams, xi, xj) -> tuple[float, np.ndarray]:
    """Kernel value and its gradient with respect to ``hyp.theta``."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    xj = np.atleast_1d(np.asarray(xj, dtype=float))
    r = scaled_distance(xi, xj, hyp.length_scales)
    j = 0 if hyp.kind == "se" else smoothness_exponent(hyp.input_dim, hyp.q)
    code = _CODE[hyp.kind]
    v = _kappa(code, j, hyp.magnitude, r)[0]
    h = _dkappa_over_r(code, j, hyp.magnitude, r)
    grad = np.empty(hyp.n_params)
    grad[0] = v
    grad[1:] = -h * ((xi - xj) / hyp.length_scales) ** 2
    return v, grad


@njit(cache=True)
def _pair_counts(X, Z, inv_l2, code, same):
    n, m = X.shape[0], Z.shape[0]
    counts = np.zeros(m, dtype=np.int64)
    for c in range(m):
        for r in range(n):
            if same and r == c:
                counts[c] += 1
                continue
            if code == 0:
                counts[c] += 1
                continue
            d2 = 0.0
            for k in range(X.shape[1]):
                t = X[r, k] - Z[c, k]
                d2 += t * t * inv_l2[k]
            if d2 < 1.0:
                counts[c] += 1
    return counts


@njit(cache=True)
def _fill(X, Z, inv_l2, code, j, s2, same, jitter, indptr, want_grad):
    """Column-major assembly of K(X, Z); rows sorted within each column."""
    n, m, d = X.shape[0], Z.shape[0], X.shape[1]
    nnz = indptr[m]
    idx = np.empty(nnz, dtype=np.int64)
    val = np.empty(nnz)
    ng = d + 1 if want_grad else 0
    grad = np.zeros((ng, nnz))
    diff2 = np.empty(d)
    for c in range(m):
        p = indptr[c]
        for r in range(n):
            d2 = 0.0
            for k in range(d):
                t = X[r, k] - Z[c, k]
                diff2[k] = t * t * inv_l2[k]
                d2 += diff2[k]
            if same and r == c:
                idx[p] = r
                val[p] = s2 * (1.0 + jitter)
                if want_grad:
                    grad[0, p] = val[p]
                p += 1
                continue
            if code != 0 and d2 >= 1.0:
                continue
            rr = np.sqrt(d2)
            v = _kappa(code, j, s2, rr)[0]
            idx[p] = r
            val[p] = v
            if want_grad:
                grad[0, p] = v
                h = _dkappa_over_r(code, j, s2, rr)
                for k in range(d):
                    grad[k + 1, p] = -h * diff2[k]
            p += 1
    return idx, val, grad


@dataclass
class KernelMatrixBundle:
    """Covariance matrix plus its theta-derivatives on the same pattern.

    ``grads[k]`` holds the stored values of dK/dtheta_k aligned with
    ``K.indices``.  The relative jitter scales with the magnitude, so the
    magnitude derivative is K itself.
    """

    K: SparseSymMatrix
    grads: np.ndarray
    hyp: Hyperparams
    jitter: float

    def grad_matrix(self, k: int) -> SparseSymMatrix:
        return self.K.with_data(self.grads[k])

    @property
    def fill(self) -> float:
        return self.K.nnz / self.K.n ** 2


def _prep(X, hyp):
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=float)))
    if X.shape[1] != hyp.input_dim:
        raise ValueError(f"inputs have {X.shape[1]} columns, hyperparameters expect {hyp.input_dim}")
    j = 0 if hyp.kind == "se" else smoothness_exponent(hyp.input_dim, hyp.q)
    return X, 1.0 / hyp.length_scales ** 2, _CODE[hyp.kind], j


def build_kernel_matrix(X, hyp: Hyperparams, jitter: float = 1e-8, grads: bool = True) -> KernelMatrixBundle:
    """Training covariance with ``magnitude * jitter`` added to the diagonal.

    Piecewise polynomial kernels store only pairs with r < 1 (and the
    diagonal); the squared exponential gets a fully dense pattern.
    """
    X, inv_l2, code, j = _prep(X, hyp)
    n = X.shape[0]
    counts = _pair_counts(X, X, inv_l2, code, True)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    idx, val, g = _fill(X, X, inv_l2, code, j, hyp.magnitude, True, jitter, indptr, grads)
    return KernelMatrixBundle(SparseSymMatrix(n, indptr, idx, val), g, hyp, jitter)


def cross_kernel(X_train, X_star, hyp: Hyperparams) -> sp.csr_matrix:
    """``K(X_star, X_train)`` as a sparse (n_star x n_train) matrix, no jitter."""
    X, inv_l2, code, j = _prep(X_train, hyp)
    Z, _, _, _ = _prep(X_star, hyp)
    counts = _pair_counts(X, Z, inv_l2, code, False)
    indptr = np.zeros(Z.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    idx, val, _ = _fill(X, Z, inv_l2, code, j, hyp.magnitude, False, 0.0, indptr, False)
    # column-major over test points equals row-major of the (n_star, n_train) matrix
    return sp.csr_matrix((val, idx, indptr), shape=(Z.shape[0], X.shape[0]))
