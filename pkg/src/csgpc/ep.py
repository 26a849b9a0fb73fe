"""Expectation propagation for binary GP classification.

Two implementations of the same sequential EP iteration live here:

* :func:`run_sparse_ep` keeps an LDL' factor of ``B = I + S K S``
  (``S = diag(sqrt(tau_tilde))``) and patches one row of it per site update,
  so the cost follows the fill of the factor.
* :func:`run_dense_ep` keeps the full posterior covariance and applies the
  classic rank-one update per site.  It is the reference the sparse path is
  checked against.

Both visit sites in the same order and use the same site update, so from
identical starting sites they follow the same trajectory up to roundoff.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
from numba import njit
from scipy.linalg.blas import dger
from scipy.special import log_ndtr

from . import _kernels
from . import sparse as sps
from .covariance import Hyperparams, KernelMatrixBundle, cross_kernel
from .likelihoods import Likelihood, Probit, TiltedMoments, probit_moments
from .sparse import LdlFactor, SparseSymMatrix

log = logging.getLogger(__name__)

__all__ = [
    "EpConfig", "SiteParams", "EpState", "EpDiagnostics", "TiltedMoments",
    "cavity", "probit_moments", "site_update", "run_sparse_ep", "run_dense_ep",
    "log_marginal", "ep_gradient", "dense_ep_gradient", "predict", "SparseEp",
]

# above this fill of L (and up to the size cap) the all-marginals pass goes
# through a dense BLAS triangular solve, which then beats n sparse solves
_DENSE_MARGINALS_FILL = 0.2
_DENSE_MARGINALS_MAX_N = 5000


class InvalidCavity(ArithmeticError):
    pass


class NotConvergedError(RuntimeError):
    pass


@dataclass
class EpConfig:
    tol: float = 1e-4
    max_sweeps: int = 100
    damping: float = 1.0
    site_order: str = "natural"  # or "random"
    clamp_policy: str = "match-mean"  # or "keep-nu"
    min_sweeps: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.site_order not in ("natural", "random"):
            raise ValueError(f"unknown site order {self.site_order!r}")
        if self.clamp_policy not in ("match-mean", "keep-nu"):
            raise ValueError(f"unknown clamp policy {self.clamp_policy!r}")


@dataclass
class SiteParams:
    nu_tilde: np.ndarray
    tau_tilde: np.ndarray
    gamma: np.ndarray  # K @ nu_tilde, maintained incrementally

    @classmethod
    def zeros(cls, n: int) -> "SiteParams":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))

    def copy(self) -> "SiteParams":
        return SiteParams(self.nu_tilde.copy(), self.tau_tilde.copy(), self.gamma.copy())


@dataclass
class EpDiagnostics:
    updates: int = 0
    skipped: int = 0
    clamped: int = 0
    refactorizations: int = 0
    log_z_trace: list = field(default_factory=list)
    gamma_drift: list = field(default_factory=list)

    @property
    def clamp_rate(self) -> float:
        return self.clamped / max(self.updates, 1)


@dataclass
class EpState:
    y: np.ndarray
    sites: SiteParams
    log_z: float
    mu: np.ndarray
    sigma2: np.ndarray
    sweeps: int
    converged: bool
    delta: float
    factor: LdlFactor | None
    diagnostics: EpDiagnostics

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def nu_tilde(self):
        return self.sites.nu_tilde

    @property
    def tau_tilde(self):
        return self.sites.tau_tilde


# -- per-site arithmetic -----------------------------------------------------


def cavity(mu_i, sigma2_i, nu_tilde_i, tau_tilde_i) -> tuple[float, float]:
    """Remove site i from its marginal; returns (mean, variance)."""
    if not sigma2_i > 0:
        raise ValueError("marginal variance must be positive")
    tau_cav = 1.0 / sigma2_i - tau_tilde_i
    if not tau_cav > 0:
        raise InvalidCavity(f"cavity precision {tau_cav} is not positive")
    nu_cav = mu_i / sigma2_i - nu_tilde_i
    return nu_cav / tau_cav, 1.0 / tau_cav


def site_update(mu_cav, sigma2_cav, tilted: TiltedMoments, policy: str = "match-mean"):
    """Site natural parameters that make cavity x site match ``tilted``.

    Returns ``(nu_tilde, tau_tilde, clamped)``.  A negative precision is
    clamped to zero; with ``"match-mean"`` the natural mean is then chosen so
    the new marginal still has the tilted mean, with ``"keep-nu"`` it is left
    as computed.
    """
    tau_cav = 1.0 / sigma2_cav
    nu_cav = mu_cav * tau_cav
    tau_new = 1.0 / tilted.sigma2_hat - tau_cav
    nu_new = tilted.mu_hat / tilted.sigma2_hat - nu_cav
    clamped = False
    if not tau_new > 0:
        if tau_new < 0 or not np.isfinite(tau_new):
            clamped = True
        tau_new = 0.0
        if clamped and policy == "match-mean":
            nu_new = tilted.mu_hat * tau_cav - nu_cav
    return float(nu_new), float(tau_new), clamped


class _SiteStepper:
    """Shared cavity -> tilted -> site logic for both EP paths."""

    def __init__(self, y, cfg: EpConfig, likelihood: Likelihood, diag: EpDiagnostics):
        self.y = y
        self.cfg = cfg
        self.lik = likelihood
        self.diag = diag

    def step(self, i, mu_i, s2_i, nu_i, tau_i):
        """New (nu, tau) for site i, or None if the cavity is invalid."""
        self.diag.updates += 1
        try:
            m_cav, v_cav = cavity(mu_i, s2_i, nu_i, tau_i)
        except (InvalidCavity, ValueError):
            self.diag.skipped += 1
            return None
        mom = self.lik.tilted_moments(self.y[i], m_cav, v_cav)
        nu_new, tau_new, clamped = site_update(m_cav, v_cav, mom, self.cfg.clamp_policy)
        if clamped:
            self.diag.clamped += 1
        eta = self.cfg.damping
        if eta < 1.0:
            nu_new = (1 - eta) * nu_i + eta * nu_new
            tau_new = (1 - eta) * tau_i + eta * tau_new
        return nu_new, tau_new

    def order(self, n, sweep):
        if self.cfg.site_order == "natural":
            return range(n)
        rng = np.random.Generator(np.random.Philox(key=[self.cfg.seed, sweep]))
        return rng.permutation(n)


def _evidence(y, mu, sigma2, nu_t, tau_t, half_logdet_B, likelihood=None):
    """EP log marginal likelihood from exact marginals and sites.

    Written in natural parameters so that sites with zero precision enter
    through their limiting terms.  ``likelihood`` must expose the log
    normalizer via ``tilted_moments``.
    """
    tau_cav = 1.0 / sigma2 - tau_t
    nu_cav = mu / sigma2 - nu_t
    if np.any(tau_cav <= 0):
        return np.nan, tau_cav, nu_cav
    lik = likelihood or Probit()
    log_z_hat = np.asarray(lik.tilted_moments(y, nu_cav / tau_cav, 1.0 / tau_cav).log_z_hat)
    tau_sum = tau_cav + tau_t
    val = (
        -half_logdet_B
        + log_z_hat.sum()
        + 0.5 * nu_t @ mu
        + 0.5 * nu_cav @ ((tau_t / tau_cav * nu_cav - 2.0 * nu_t) / tau_sum)
        - 0.5 * np.sum(nu_t ** 2 / tau_sum)
        + 0.5 * np.sum(np.log1p(tau_t / tau_cav))
    )
    return float(val), tau_cav, nu_cav


# -- sparse EP ----------------------------------------------------------------


class SparseEp:
    """Mutable sparse EP state; :func:`run_sparse_ep` drives it.

    Exposed for step-by-step inspection: :meth:`update_site` performs one
    site update followed by the row modification of the factor.
    """

    def __init__(self, K: SparseSymMatrix, y, cfg: EpConfig | None = None, *,
                 sites: SiteParams | None = None, symbolic=None,
                 likelihood: Likelihood | None = None):
        self.K = K
        self.y = np.asarray(y, dtype=float)
        self.n = K.n
        if self.y.shape != (self.n,):
            raise ValueError("labels do not match the covariance size")
        self.cfg = cfg or EpConfig()
        self.lik = likelihood or Probit()
        self.diag = EpDiagnostics()
        self.stepper = _SiteStepper(self.y, self.cfg, self.lik, self.diag)
        self.kdiag = K.diagonal()
        self._cols = K.col_index()
        self._is_diag = self._cols == K.indices
        self.symbolic = symbolic if symbolic is not None else sps.symbolic_analyze(K)
        if sites is None:
            sites = SiteParams.zeros(self.n)
        else:
            sites = sites.copy()
            sites.gamma = K.matvec(sites.nu_tilde)
        self.sites = sites
        self.s = np.sqrt(sites.tau_tilde)
        try:
            self.factor = sps.ldl_factorize(self.B(), self.symbolic)
        except sps.NotPositiveDefiniteError:
            log.warning("event=warm_start_rejected reason=not_pd")
            self.sites = SiteParams.zeros(self.n)
            self.s = np.zeros(self.n)
            self.factor = sps.ldl_factorize(self.B(), self.symbolic)
        self._pinv = self.symbolic.perm.inverse
        self._prows = self._pinv[K.indices]
        self._R = np.zeros(self.n)
        self._reset_v()

    def _reset_v(self):
        """``v = L^-1 P (s * gamma)``, kept current through site updates."""
        sym = self.symbolic
        v = (self.s * self.sites.gamma)[sym.perm.forward]
        _kernels.forward_dense(self.n, sym.Lp, sym.Li, self.factor.Lx, v)
        self.v = v

    def B(self) -> SparseSymMatrix:
        """``I + S K S`` on the pattern of K."""
        K = self.K
        data = self.s[K.indices] * self.s[self._cols] * K.data
        data[self._is_diag] += 1.0
        return K.with_data(data)

    def marginal(self, i: int) -> tuple[float, float]:
        """Posterior (mean, variance) of latent i under the current factor."""
        lo, hi = self.K.indptr[i], self.K.indptr[i + 1]
        sym = self.symbolic
        return _site_marginal(self.n, sym.Lp, sym.Li, self.factor.Lx, self.factor.D, sym.parent,
                              self._prows[lo:hi], self.K.indices[lo:hi], self.K.data[lo:hi], self.s,
                              self.v, self.sites.gamma[i], self.kdiag[i])

    def update_site(self, i: int) -> bool:
        """One EP step at site i; returns False if the site was skipped."""
        return self._update(i, None, -1)[0]

    def _update(self, i, marg, nxt):
        """Site step at i, optionally returning the marginal of site ``nxt``.

        ``marg`` is the current marginal of site i when already known.
        """
        mu_i, s2_i = marg if marg is not None else self.marginal(i)
        st = self.sites
        res = self.stepper.step(i, mu_i, s2_i, st.nu_tilde[i], st.tau_tilde[i])
        if res is None:
            return False, None
        nu_new, tau_new = res
        d_nu = nu_new - st.nu_tilde[i]
        changed = tau_new != st.tau_tilde[i]
        st.nu_tilde[i] = nu_new
        st.tau_tilde[i] = tau_new
        ptr = self.K.indptr
        lo, hi = ptr[i], ptr[i + 1]
        nlo, nhi = (ptr[nxt], ptr[nxt + 1]) if nxt >= 0 else (0, 0)
        sym = self.symbolic
        status, quad, dot = _apply_site(
            self.n, sym.Ap, sym.Ai, sym.Lp, sym.Li, self.factor.Lx, self.factor.D, sym.parent,
            int(self._pinv[i]), self._prows[lo:hi], self.K.indices[lo:hi], self.K.data[lo:hi],
            i, np.sqrt(tau_new), d_nu, changed, self.s, st.gamma, self.v, self._R,
            self._prows[nlo:nhi], self.K.indices[nlo:nhi], self.K.data[nlo:nhi])
        if status == _kernels.PATTERN_ERROR:
            raise sps.PatternError(f"row {i} of B leaves the frozen pattern")
        if status != _kernels.OK:
            self._refactorize()
            return True, None
        if nxt < 0:
            return True, None
        return True, (st.gamma[nxt] - dot, self.kdiag[nxt] - quad)

    def _refactorize(self):
        self.diag.refactorizations += 1
        log.info("event=refactorize reason=row_modify_failed")
        self.factor.refactor(self.B())
        self._R[:] = 0.0
        self._reset_v()

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        """Exact posterior means and variances from the current factor."""
        return exact_marginals(self.K, self.factor, self.s, self.sites.nu_tilde)

    def log_marginal(self):
        mu, s2 = self.marginals()
        val, _, _ = _evidence(self.y, mu, s2, self.sites.nu_tilde, self.sites.tau_tilde,
                              0.5 * sps.logdet(self.factor), self.lik)
        return val, mu, s2

    def sweep(self, number: int):
        order = [int(i) for i in self.stepper.order(self.n, number)]
        marg = None
        for t, i in enumerate(order):
            # each update also yields the marginal of the next site
            nxt = order[t + 1] if t + 1 < len(order) else -1
            marg = self._update(i, marg, nxt)[1]
        self._reset_v()

    def gamma_drift(self) -> float:
        return float(np.max(np.abs(self.sites.gamma - self.K.matvec(self.sites.nu_tilde)), initial=0.0))

    def run(self) -> EpState:
        cfg = self.cfg
        log_z, mu, s2 = self.log_marginal()
        delta = np.inf
        converged = False
        sweeps = 0
        while sweeps < cfg.max_sweeps:
            self.sweep(sweeps)
            sweeps += 1
            new, mu, s2 = self.log_marginal()
            delta = abs(new - log_z) if np.isfinite(log_z) else np.inf
            log_z = new
            self.diag.log_z_trace.append(log_z)
            self.diag.gamma_drift.append(self.gamma_drift())
            log.debug("event=sweep sweep=%d log_z=%.10g delta=%.3g", sweeps, log_z, delta)
            if sweeps >= cfg.min_sweeps and delta < cfg.tol:
                converged = True
                break
        self.diag.refactorizations += self.factor.refactorizations
        self.factor.refactorizations = 0
        _report(self.diag, sweeps, converged, log_z)
        return EpState(self.y, self.sites.copy(), log_z, mu, s2, sweeps, converged, delta,
                       self.factor, self.diag)


@njit(cache=True)
def _site_marginal(n, Lp, Li, Lx, D, parent, prows, rows, kv, s, v, gamma_i, k_ii):
    """Posterior mean and variance of one latent from ``v = L^-1 P (s * gamma)``."""
    val = np.empty(rows.shape[0])
    for q in range(rows.shape[0]):
        val[q] = s[rows[q]] * kv[q]
    quad, dot = _kernels.forward_quad_dot(n, Lp, Li, Lx, D, parent, prows, val, v)
    return gamma_i - dot, k_ii - quad


@njit(cache=True)
def _apply_site(n, Ap, Ai, Lp, Li, Lx, D, parent, k, prows, rows, kv, i, s_i, d_nu, changed,
                s, gamma, v, R, nprows, nrows, nkv):
    """Move site i to ``s_i = sqrt(tau)`` and ``nu + d_nu``.

    Updates gamma, patches row i of the factor of B and keeps v current.
    The forward pass that refreshes v also serves the next site (column
    ``nrows, nkv`` of K, possibly empty).  Returns the row-modify status and
    that site's quad and dot terms; on failure the caller refactorizes.
    """
    m = rows.shape[0]
    for q in range(m):
        R[prows[q]] -= s[rows[q]] * gamma[rows[q]]
    s[i] = s_i
    for q in range(m):
        gamma[rows[q]] += kv[q] * d_nu
    col = np.empty(m)
    if changed:
        for q in range(m):
            r = rows[q]
            col[q] = 1.0 + s_i * s_i * kv[q] if r == i else s_i * s[r] * kv[q]
    for q in range(m):
        R[prows[q]] += s[rows[q]] * gamma[rows[q]]
    val = np.empty(nrows.shape[0])
    for q in range(nrows.shape[0]):
        val[q] = s[nrows[q]] * nkv[q]
    if changed:
        return _kernels.row_modify_solve(n, Ap, Ai, Lp, Li, Lx, D, parent, k, prows, col, v, R,
                                         nprows, val)
    quad, dot = _kernels.forward_pair(n, Lp, Li, Lx, D, parent, prows, R, v, nprows, val)
    return _kernels.OK, quad, dot


def _report(diag: EpDiagnostics, sweeps, converged, log_z):
    log.info("event=ep_done sweeps=%d converged=%s log_z=%.10g skipped=%d clamped=%d refactorizations=%d",
             sweeps, converged, log_z, diag.skipped, diag.clamped, diag.refactorizations)
    if diag.clamp_rate > 0.01:
        log.warning("event=clamp_rate_high rate=%.4f", diag.clamp_rate)
    if not converged:
        log.warning("event=ep_not_converged sweeps=%d", sweeps)


def exact_marginals(K: SparseSymMatrix, factor: LdlFactor, s: np.ndarray, nu_t: np.ndarray):
    """Means and variances of ``(K^-1 + S^2)^-1`` and its mean ``Sigma nu``."""
    n = K.n
    gamma = K.matvec(nu_t)
    if not np.any(s):
        # B = I: the prior marginals, shifted by the zero-precision sites
        return gamma, K.diagonal()
    t = sps.solve(factor, s * gamma)
    mu = gamma - K.matvec(s * t)
    kdiag = K.diagonal()
    if factor.nnz / (n * (n + 1) / 2) > _DENSE_MARGINALS_FILL and n <= _DENSE_MARGINALS_MAX_N:
        sym = factor.symbolic
        L = factor.L_scipy().toarray()
        SK = (s[:, None] * K.to_dense())[sym.perm.forward]
        V = scipy.linalg.solve_triangular(L, SK, lower=True, unit_diagonal=True, check_finite=False)
        quad = np.einsum("ij,ij->j", V, V / factor.D[:, None])
    else:
        quad = np.empty(n)
        for i in range(n):
            rows, kv = K.column(i)
            quad[i] = sps.inv_quad(factor, (rows, s[rows] * kv))
    return mu, kdiag - quad


def run_sparse_ep(K, y, cfg: EpConfig | None = None, *, sites: SiteParams | None = None,
                  symbolic=None, likelihood: Likelihood | None = None) -> EpState:
    """Sequential EP with incremental LDL' row modifications of B.

    ``K`` is a :class:`SparseSymMatrix` or a :class:`KernelMatrixBundle`.
    Sites start at zero unless ``sites`` is given (warm start).
    """
    if isinstance(K, KernelMatrixBundle):
        K = K.K
    return SparseEp(K, y, cfg, sites=sites, symbolic=symbolic, likelihood=likelihood).run()


# -- dense reference EP -----------------------------------------------------


def _dense_posterior(K, nu_t, tau_t):
    """Sigma, mu and log|B|/2 recomputed from a Cholesky factor of B."""
    s = np.sqrt(tau_t)
    B = np.eye(K.shape[0]) + s[:, None] * K * s[None, :]
    L = scipy.linalg.cholesky(B, lower=True, check_finite=False)
    V = scipy.linalg.solve_triangular(L, s[:, None] * K, lower=True, check_finite=False)
    Sigma = K - V.T @ V
    Sigma = np.asfortranarray(0.5 * (Sigma + Sigma.T))
    return Sigma, Sigma @ nu_t, float(np.sum(np.log(np.diag(L))))


def run_dense_ep(K, y, cfg: EpConfig | None = None, *, sites: SiteParams | None = None,
                 likelihood: Likelihood | None = None) -> EpState:
    """Reference EP with full-covariance rank-one updates.

    Sigma is rebuilt from a Cholesky factor of B after every sweep to keep
    the rank-one updates from drifting.
    """
    if isinstance(K, KernelMatrixBundle):
        K = K.K
    if isinstance(K, SparseSymMatrix):
        K = K.to_dense()
    K = np.asarray(K, dtype=float)
    y = np.asarray(y, dtype=float)
    n = K.shape[0]
    cfg = cfg or EpConfig()
    lik = likelihood or Probit()
    diag = EpDiagnostics()
    stepper = _SiteStepper(y, cfg, lik, diag)
    st = SiteParams.zeros(n) if sites is None else sites.copy()
    nu_t, tau_t = st.nu_tilde, st.tau_tilde

    Sigma, mu, half_ld = _dense_posterior(K, nu_t, tau_t)
    log_z = _evidence(y, mu, np.diag(Sigma).copy(), nu_t, tau_t, half_ld, lik)[0]
    delta = np.inf
    converged = False
    sweeps = 0
    while sweeps < cfg.max_sweeps:
        for i in stepper.order(n, sweeps):
            i = int(i)
            res = stepper.step(i, mu[i], Sigma[i, i], nu_t[i], tau_t[i])
            if res is None:
                continue
            nu_new, tau_new = res
            d_tau = tau_new - tau_t[i]
            d_nu = nu_new - nu_t[i]
            s_col = Sigma[:, i].copy()
            dlt = d_tau / (1.0 + d_tau * s_col[i])
            mu += s_col * (d_nu - dlt * (mu[i] + d_nu * s_col[i]))
            if d_tau != 0.0:
                Sigma = dger(-dlt, s_col, s_col, a=Sigma, overwrite_a=True)
            nu_t[i] = nu_new
            tau_t[i] = tau_new
        sweeps += 1
        Sigma, mu, half_ld = _dense_posterior(K, nu_t, tau_t)
        new = _evidence(y, mu, np.diag(Sigma).copy(), nu_t, tau_t, half_ld, lik)[0]
        delta = abs(new - log_z) if np.isfinite(log_z) else np.inf
        log_z = new
        diag.log_z_trace.append(log_z)
        if sweeps >= cfg.min_sweeps and delta < cfg.tol:
            converged = True
            break
    st.gamma = K @ nu_t
    _report(diag, sweeps, converged, log_z)
    return EpState(y, st, log_z, mu, np.diag(Sigma).copy(), sweeps, converged, delta, None, diag)


def dense_rank_one_update(Sigma, i, d_tau):
    """Posterior covariance after changing site precision i by ``d_tau``."""
    s_col = Sigma[:, i].copy()
    dlt = d_tau / (1.0 + d_tau * s_col[i])
    return Sigma - dlt * np.outer(s_col, s_col)


# -- evidence, gradient, prediction -------------------------------------------


def _factor_for(state: EpState, K: SparseSymMatrix) -> LdlFactor:
    """B factor consistent with the state's sites."""
    if state.factor is not None and state.factor.n == K.n:
        return state.factor
    ep = SparseEp(K, state.y, sites=state.sites)
    return ep.factor


def log_marginal(state: EpState, K, y=None, likelihood: Likelihood | None = None) -> float:
    """EP approximation to log p(y | X, theta) at the state's sites.

    The B factor is rebuilt from scratch, so this is independent of how the
    state was produced.
    """
    if isinstance(K, KernelMatrixBundle):
        K = K.K
    if not isinstance(K, SparseSymMatrix):
        K = SparseSymMatrix.full(K)
    y = state.y if y is None else np.asarray(y, dtype=float)
    ep = SparseEp(K, y, sites=state.sites, likelihood=likelihood)
    return ep.log_marginal()[0]


def posterior_weights(state: EpState, K: SparseSymMatrix, factor: LdlFactor | None = None) -> np.ndarray:
    """``(K + Sigma_tilde)^-1 mu_tilde`` written with natural site parameters."""
    factor = factor or _factor_for(state, K)
    s = np.sqrt(state.sites.tau_tilde)
    nu = state.sites.nu_tilde
    return nu - s * sps.solve(factor, s * K.matvec(nu))


def ep_gradient(state: EpState, bundle: KernelMatrixBundle, *, require_converged: bool = True) -> np.ndarray:
    """Gradient of the EP log marginal likelihood with respect to theta.

    Valid at an EP fixed point.  The trace term only needs
    ``(K + Sigma_tilde)^-1`` on the pattern of K, which the selected
    inverse of B supplies.
    """
    if require_converged and not state.converged:
        raise NotConvergedError("EP gradient requires a converged state")
    K = bundle.K
    factor = _factor_for(state, K)
    s = np.sqrt(state.sites.tau_tilde)
    b = posterior_weights(state, K, factor)
    rows, cols = K.indices, K.col_index()
    z = sps.selected_inverse(factor).on_pattern(K) * s[rows] * s[cols]
    outer = b[rows] * b[cols]
    return 0.5 * bundle.grads @ (outer - z)


def dense_ep_gradient(state: EpState, bundle: KernelMatrixBundle, *, require_converged: bool = True) -> np.ndarray:
    """Same gradient as :func:`ep_gradient` through dense Cholesky algebra."""
    if require_converged and not state.converged:
        raise NotConvergedError("EP gradient requires a converged state")
    K = bundle.K.to_dense()
    s = np.sqrt(state.sites.tau_tilde)
    nu = state.sites.nu_tilde
    B = np.eye(K.shape[0]) + s[:, None] * K * s[None, :]
    cf = scipy.linalg.cho_factor(B, lower=True, check_finite=False)
    b = nu - s * scipy.linalg.cho_solve(cf, s * (K @ nu), check_finite=False)
    Z = s[:, None] * scipy.linalg.cho_solve(cf, np.diag(s), check_finite=False)
    rows, cols = bundle.K.indices, bundle.K.col_index()
    return 0.5 * bundle.grads @ (b[rows] * b[cols] - Z[rows, cols])


@dataclass
class Prediction:
    mean: np.ndarray
    variance: np.ndarray
    prob: np.ndarray  # p(y* = +1)


def predict(state: EpState, bundle: KernelMatrixBundle, X_train, X_star,
            hyp: Hyperparams | None = None, likelihood=None) -> Prediction:
    """Latent predictive moments and class probabilities at ``X_star``."""
    hyp = hyp or bundle.hyp
    K = bundle.K
    factor = _factor_for(state, K)
    b = posterior_weights(state, K, factor)
    Ks = cross_kernel(X_train, X_star, hyp)
    mean = Ks @ b
    s = np.sqrt(state.sites.tau_tilde)
    var = np.empty(Ks.shape[0])
    for r in range(Ks.shape[0]):
        lo, hi = Ks.indptr[r], Ks.indptr[r + 1]
        idx = Ks.indices[lo:hi]
        var[r] = hyp.magnitude - sps.inv_quad(factor, (idx, s[idx] * Ks.data[lo:hi]))
    lik = likelihood or Probit()
    return Prediction(mean, var, lik.predictive_prob(mean, var))
