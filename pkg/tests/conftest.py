import warnings

import numpy as np
import pytest

from csgpc.sparse import SparseSymMatrix

# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict = {}


def random_spd(n, density, rng, diag_boost=1.0):
    """Sparse SPD matrix with a random symmetric pattern, plus its dense copy."""
    mask = rng.random((n, n)) < density
    mask = mask | mask.T
    np.fill_diagonal(mask, True)
    A = np.where(mask, rng.standard_normal((n, n)), 0.0)
    A = 0.5 * (A + A.T)
    # diagonal dominance keeps it comfortably positive definite
    A[np.diag_indices(n)] = np.abs(A).sum(axis=1) + diag_boost
    return SparseSymMatrix.from_dense(A, keep_pattern=mask), A


def cluster_data(n, d=2, seed=0, n_centers=20, box=10.0):
    rng = np.random.default_rng(seed)
    C = rng.uniform(0, box, (n_centers, d))
    lab = np.where(np.arange(n_centers) % 2 == 0, 1.0, -1.0)
    X = rng.uniform(0, box, (n, d))
    y = lab[np.argmin(((X[:, None] - C[None]) ** 2).sum(-1), axis=1)]
    return X, y


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


def tilted_quadrature(y, mu, var):
    """log Z, mean and variance of Phi(y f) N(f | mu, var) by adaptive quadrature.

    The integrand is strongly log-concave, so integrating over twelve prior
    standard deviations around its mode loses nothing measurable.
    """
    from scipy import integrate, optimize
    from scipy.special import log_ndtr

    def logp(f):
        return log_ndtr(y * f) - 0.5 * (f - mu) ** 2 / var - 0.5 * np.log(2 * np.pi * var)

    sd = np.sqrt(var)
    mode = optimize.minimize_scalar(lambda f: -logp(f), bracket=(mu - sd, mu + sd)).x
    top = logp(mode)
    lo, hi = mode - 12 * sd, mode + 12 * sd

    def moment(p):
        with warnings.catch_warnings():
            # quad flags roundoff once it has hit machine precision
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            return integrate.quad(lambda f: (f - mode) ** p * np.exp(logp(f) - top), lo, hi,
                                  points=[mode], epsabs=0, epsrel=1e-12, limit=200)[0]

    m0, m1, m2 = moment(0), moment(1), moment(2)
    mean = m1 / m0
    return top + np.log(m0), mode + mean, m2 / m0 - mean ** 2
