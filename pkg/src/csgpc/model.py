"""MAP hyperparameters for sparse EP classification.

The objective is the negative log posterior ``-(log Z_EP + log p(theta))``
over ``theta = [log sigma^2, log l_1, ..., log l_d]``.  Half Student-t
priors sit on the positive scales ``sigma`` and ``l_d``; the change of
variables to ``theta`` contributes its log-Jacobian.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import line_search
from scipy.special import gammaln

from . import ep
from . import sparse as sps
from .covariance import Hyperparams, KernelMatrixBundle, build_kernel_matrix

log = logging.getLogger(__name__)

__all__ = [
    "HalfStudentTPrior", "log_prior_and_grad", "OptimizerConfig", "ModelConfig",
    "MapObjective", "minimize_bfgs", "OptimizeResult", "optimize", "initial_theta",
    "GPClassifier", "state_from_sites",
]


@dataclass(frozen=True)
class HalfStudentTPrior:
    """Student-t density folded onto the positive half-line."""

    degrees_of_freedom: float = 4.0
    scale: float = 6.0

    def __post_init__(self):
        if not self.degrees_of_freedom > 0 or not self.scale > 0:
            raise ValueError("degrees of freedom and scale must be positive")

    @property
    def log_norm(self) -> float:
        nu, s = self.degrees_of_freedom, self.scale
        return (math.log(2.0) + gammaln((nu + 1) / 2) - gammaln(nu / 2)
                - 0.5 * math.log(nu * math.pi * s * s))


def log_prior_and_grad(theta_positive, prior: HalfStudentTPrior):
    """Log density of ``prior`` at a positive value and its derivative in log scale.

    Parameters
    ----------
    theta_positive : float or ndarray
        Values on the positive half-line.
    prior : HalfStudentTPrior

    Returns
    -------
    logp : float or ndarray
        Normalized log density.
    dlogp : float or ndarray
        ``d logp / d log(theta_positive)``.
    """
    t = np.asarray(theta_positive, dtype=float)
    if np.any(~(t > 0)):
        raise ValueError("prior argument must be positive")
    nu, s = prior.degrees_of_freedom, prior.scale
    t2 = t * t
    logp = prior.log_norm - 0.5 * (nu + 1) * np.log1p(t2 / (nu * s * s))
    grad = -(nu + 1) * t2 / (nu * s * s + t2)
    if t.ndim == 0:
        return float(logp), float(grad)
    return logp, grad


def log_hyperprior(theta, prior: HalfStudentTPrior | None):
    """Prior on ``theta`` including the log-Jacobian of the scale transform."""
    theta = np.asarray(theta, dtype=float)
    if prior is None:
        return 0.0, np.zeros_like(theta)
    # sigma = exp(theta_0 / 2), l_d = exp(theta_d)
    half = np.ones_like(theta)
    half[0] = 0.5
    scales = np.exp(theta * half)
    lp, g = log_prior_and_grad(scales, prior)
    logp = float(np.sum(lp) + np.sum(theta * half))
    return logp, (g + 1.0) * half


@dataclass
class OptimizerConfig:
    max_iterations: int = 100
    gtol: float = 1e-3  # infinity norm of the gradient
    ftol: float = 1e-8  # relative decrease below which the run stops
    c1: float = 1e-4
    c2: float = 0.9
    max_step: float = 2.0  # cap on the first trial step in theta
    initial_theta: np.ndarray | None = None

    def __post_init__(self):
        if self.gtol <= 0 or self.ftol < 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("line search needs 0 < c1 < c2 < 1")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be nonnegative")


@dataclass
class ModelConfig:
    kind: str = "pp3"
    prior: HalfStudentTPrior | None = field(default_factory=HalfStudentTPrior)
    ep: ep.EpConfig = field(default_factory=ep.EpConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    jitter: float = 1e-8
    warm_start: bool = True
    warm_start_radius: float = 0.5  # max |delta theta| for reusing sites
    backend: str = "auto"  # "dense" uses the reference EP, "auto" picks it for full patterns
    seed: int = 0

    def __post_init__(self):
        if self.backend not in ("sparse", "dense", "auto"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")


def initial_theta(X, kind: str = "pp3") -> np.ndarray:
    """``log sigma^2 = 0`` and ``log l_d = log(range_d / 10)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    rng = np.ptp(X, axis=0) if X.shape[0] else np.ones(X.shape[1])
    rng = np.where(rng > 0, rng, 1.0)
    return np.concatenate([[0.0], np.log(rng / 10.0)])


def state_from_sites(K, y, sites: ep.SiteParams, likelihood=None) -> ep.EpState:
    """EP state for given sites without running any sweeps."""
    if isinstance(K, KernelMatrixBundle):
        K = K.K
    e = ep.SparseEp(K, y, sites=sites, likelihood=likelihood)
    log_z, mu, s2 = e.log_marginal()
    return ep.EpState(e.y, e.sites.copy(), log_z, mu, s2, 0, True, 0.0, e.factor, e.diag)


class MapObjective:
    """Negative log posterior of theta with its gradient.

    Calling the object returns ``(value, gradient, ok)``; ``ok`` is False
    when EP did not converge, in which case value and gradient come from
    the last sweep and should be treated as unreliable.
    """

    def __init__(self, X, y, cfg: ModelConfig | None = None):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.y = np.asarray(y, dtype=float)
        if self.X.shape[0] != self.y.size:
            raise ValueError("X and y have different lengths")
        self.cfg = cfg or ModelConfig()
        self.n_evals = 0
        self.last_state: ep.EpState | None = None
        self.last_bundle: KernelMatrixBundle | None = None
        self._warm: tuple[np.ndarray, ep.SiteParams] | None = None
        self._symbolic = None

    @property
    def n(self) -> int:
        return self.y.size

    def _symbolic_for(self, K):
        # the SE pattern never changes, PP patterns do with the length-scales
        if self._symbolic is not None:
            indptr, indices, sym = self._symbolic
            if np.array_equal(indptr, K.indptr) and np.array_equal(indices, K.indices):
                return sym
        sym = sps.symbolic_analyze(K)
        self._symbolic = (K.indptr.copy(), K.indices.copy(), sym)
        return sym

    def _sites_for(self, theta):
        if not self.cfg.warm_start or self._warm is None:
            return None
        th, sites = self._warm
        if np.max(np.abs(th - theta)) < self.cfg.warm_start_radius:
            return sites
        return None

    def _use_dense(self, bundle) -> bool:
        b = self.cfg.backend
        return b == "dense" or (b == "auto" and bundle.K.is_dense)

    def evaluate(self, theta):
        theta = np.asarray(theta, dtype=float)
        self.n_evals += 1
        lp, glp = log_hyperprior(theta, self.cfg.prior)
        if self.n == 0:
            return -lp, -glp, True
        hyp = Hyperparams.from_theta(self.cfg.kind, theta)
        bundle = build_kernel_matrix(self.X, hyp, jitter=self.cfg.jitter)
        sites = self._sites_for(theta)
        if self._use_dense(bundle):
            state = ep.run_dense_ep(bundle, self.y, self.cfg.ep, sites=sites)
            grad = ep.dense_ep_gradient(state, bundle, require_converged=False)
        else:
            state = ep.run_sparse_ep(bundle, self.y, self.cfg.ep, sites=sites,
                                     symbolic=self._symbolic_for(bundle.K))
            grad = ep.ep_gradient(state, bundle, require_converged=False)
        self.last_state, self.last_bundle = state, bundle
        if state.converged:
            self._warm = (theta.copy(), state.sites.copy())
        f = -(state.log_z + lp)
        g = -(grad + glp)
        ok = bool(state.converged and np.isfinite(f) and np.all(np.isfinite(g)))
        log.debug("event=objective theta=%s f=%.10g ok=%s sweeps=%d", np.round(theta, 6), f, ok, state.sweeps)
        return float(f), g, ok

    __call__ = evaluate


@dataclass
class TraceEntry:
    iteration: int
    value: float
    grad_norm: float
    theta: np.ndarray
    n_evals: int


@dataclass
class OptimizeResult:
    theta: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    n_evals: int
    converged: bool
    stalled: bool
    message: str
    trace: list[TraceEntry]


class _Cache:
    """Memoizes ``fun`` so value and gradient share one evaluation per point."""

    def __init__(self, fun):
        self.fun = fun
        self.key = None
        self.out = None
        self.best = (np.inf, None, None)

    def __call__(self, x):
        key = np.asarray(x, dtype=float).tobytes()
        if key != self.key:
            f, g, ok = self.fun(np.asarray(x, dtype=float))
            if not ok:
                f, g = np.inf, np.full_like(np.asarray(x, dtype=float), np.nan)
            self.key, self.out = key, (f, g)
            if f < self.best[0]:
                self.best = (f, np.array(x, dtype=float), g.copy())
        return self.out

    def f(self, x):
        return self(x)[0]

    def g(self, x):
        return self(x)[1]


def _backtrack(cache, x, f0, g0, p, alpha, c1, max_halvings=20):
    slope = g0 @ p
    for _ in range(max_halvings):
        xn = x + alpha * p
        fn, gn = cache(xn)
        if np.isfinite(fn) and fn <= f0 + c1 * alpha * slope and fn < f0:
            return alpha, fn, gn
        alpha *= 0.5
    return None, None, None


def minimize_bfgs(fun, x0, cfg: OptimizerConfig | None = None) -> OptimizeResult:
    """BFGS with a strong-Wolfe line search and an Armijo fallback.

    ``fun(x)`` returns ``(value, gradient, ok)``.  Points with ``ok`` False
    count as failed trial points.  The best point seen is returned.
    """
    cfg = cfg or OptimizerConfig()
    cache = _Cache(fun)
    x = np.array(x0, dtype=float)
    f, g = cache(x)
    if not np.isfinite(f):
        raise ValueError("objective is not usable at the starting point")
    H = np.eye(x.size)
    trace = [TraceEntry(0, f, float(np.max(np.abs(g), initial=0.0)), x.copy(), 1)]
    converged = stalled = False
    message = "iteration limit"
    it = 0
    first = True
    while it < cfg.max_iterations:
        if np.max(np.abs(g), initial=0.0) < cfg.gtol:
            converged, message = True, "gradient tolerance"
            break
        p = -H @ g
        if g @ p >= 0:
            H = np.eye(x.size)
            p = -g
        step_cap = cfg.max_step / max(np.max(np.abs(p)), 1e-300)
        alpha0 = min(1.0, step_cap) if first else 1.0
        with warnings.catch_warnings():
            # a failed Wolfe search falls back to backtracking below
            warnings.filterwarnings("ignore", message="The line search algorithm")
            res = line_search(cache.f, cache.g, x, p, gfk=g, old_fval=f, c1=cfg.c1, c2=cfg.c2,
                              amax=step_cap if first else 50.0, maxiter=10)
        alpha = res[0]
        fn = None
        if alpha is not None:
            fn, gn = cache(x + alpha * p)
            if not (np.isfinite(fn) and fn < f and np.all(np.isfinite(gn))):
                alpha = None
        if alpha is None:
            alpha, fn, gn = _backtrack(cache, x, f, g, p, alpha0, cfg.c1)
        if alpha is None:
            stalled, message = True, "line search failed"
            break
        s = alpha * p
        yv = gn - g
        x_new = x + s
        it += 1
        rel = (f - fn) / max(abs(f), abs(fn), 1.0)
        x, f, g = x_new, fn, gn
        trace.append(TraceEntry(it, f, float(np.max(np.abs(g))), x.copy(), fun.n_evals if hasattr(fun, "n_evals") else 0))
        log.info("event=bfgs_step iter=%d f=%.10g gnorm=%.3g alpha=%.3g", it, f, trace[-1].grad_norm, alpha)
        sy = s @ yv
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yv):
            if first:
                H = np.eye(x.size) * (sy / (yv @ yv))
            rho = 1.0 / sy
            V = np.eye(x.size) - rho * np.outer(s, yv)
            H = V @ H @ V.T + rho * np.outer(s, s)
        first = False
        if rel < cfg.ftol:
            converged, message = True, "relative decrease below ftol"
            break
    bf, bx, bg = cache.best
    if bf < f:
        x, f, g = bx, bf, bg
    n_evals = fun.n_evals if hasattr(fun, "n_evals") else len(trace)
    return OptimizeResult(x, f, g, it, n_evals, converged, stalled, message, trace)


@dataclass
class FitResult:
    theta: np.ndarray
    hyp: Hyperparams
    state: ep.EpState
    bundle: KernelMatrixBundle
    result: OptimizeResult

    @property
    def trace(self):
        return self.result.trace


def optimize(cfg: ModelConfig, X, y) -> FitResult:
    """MAP hyperparameters, the EP state there, and the optimizer trace."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if np.asarray(y).size == 0:
        raise ValueError("cannot fit a classifier without data")
    obj = MapObjective(X, y, cfg)
    theta0 = cfg.optimizer.initial_theta
    theta0 = initial_theta(X, cfg.kind) if theta0 is None else np.asarray(theta0, dtype=float)
    res = minimize_bfgs(obj, theta0, cfg.optimizer)
    if res.stalled:
        log.warning("event=optimizer_stalled message=%s", res.message)
    # one more evaluation at the optimum, warm-started from the sites found there
    obj(res.theta)
    state, bundle = obj.last_state, obj.last_bundle
    hyp = bundle.hyp
    return FitResult(res.theta, hyp, state, bundle, res)


class GPClassifier:
    """Probit GP classifier with MAP hyperparameters.

    Examples
    --------
    >>> clf = GPClassifier(ModelConfig(kind="pp2")).fit(X, y)  # doctest: +SKIP
    >>> clf.predict_proba(X_test)  # doctest: +SKIP
    """

    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg or ModelConfig()
        self.fit_: FitResult | None = None
        self.X_: np.ndarray | None = None

    def fit(self, X, y, theta=None) -> "GPClassifier":
        """Optimize the hyperparameters, or run EP at ``theta`` if given."""
        self.X_ = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float)
        if theta is None:
            self.fit_ = optimize(self.cfg, self.X_, y)
        else:
            theta = np.asarray(theta, dtype=float)
            hyp = Hyperparams.from_theta(self.cfg.kind, theta)
            bundle = build_kernel_matrix(self.X_, hyp, jitter=self.cfg.jitter)
            state = ep.run_sparse_ep(bundle, y, self.cfg.ep)
            self.fit_ = FitResult(theta, hyp, state, bundle, None)
        return self

    @classmethod
    def from_sites(cls, cfg: ModelConfig, X, y, theta, sites: ep.SiteParams) -> "GPClassifier":
        """Rebuild a fitted classifier from stored site parameters."""
        self = cls(cfg)
        self.X_ = np.atleast_2d(np.asarray(X, dtype=float))
        theta = np.asarray(theta, dtype=float)
        hyp = Hyperparams.from_theta(cfg.kind, theta)
        bundle = build_kernel_matrix(self.X_, hyp, jitter=cfg.jitter)
        state = state_from_sites(bundle, y, sites)
        self.fit_ = FitResult(theta, hyp, state, bundle, None)
        return self

    def _check(self):
        if self.fit_ is None:
            raise RuntimeError("classifier is not fitted")
        return self.fit_

    @property
    def hyperparams(self) -> Hyperparams:
        return self._check().hyp

    def predict_latent(self, X_star) -> ep.Prediction:
        fit = self._check()
        return ep.predict(fit.state, fit.bundle, self.X_, X_star, fit.hyp)

    def predict_proba(self, X_star) -> np.ndarray:
        return self.predict_latent(X_star).prob

    def predict(self, X_star) -> np.ndarray:
        return np.where(self.predict_proba(X_star) > 0.5, 1.0, -1.0)
