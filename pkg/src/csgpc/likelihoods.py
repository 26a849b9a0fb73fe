"""Likelihoods for EP moment matching.

Only the probit link ships.  Any object with a ``tilted_moments`` method of
the same signature can be handed to the EP routines instead.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Protocol

import numpy as np
from scipy.special import log_ndtr, ndtr

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class TiltedMoments(NamedTuple):
    log_z_hat: float
    mu_hat: float
    sigma2_hat: float


class Likelihood(Protocol):
    def tilted_moments(self, y, mu_cav, sigma2_cav) -> TiltedMoments: ...

    def log_predictive(self, y, mu, sigma2): ...


def inv_mills(z):
    """phi(z) / Phi(z), stable far into the lower tail."""
    z = np.asarray(z, dtype=float)
    return np.exp(-0.5 * z * z - _LOG_SQRT_2PI - log_ndtr(z))


def probit_moments(y, mu_cav, sigma2_cav) -> TiltedMoments:
    """Moments of ``Phi(y f) N(f | mu_cav, sigma2_cav)``, normalizer in log."""
    if np.ndim(y) == 0 and np.ndim(mu_cav) == 0 and np.ndim(sigma2_cav) == 0:
        return _probit_moments_scalar(float(y), float(mu_cav), float(sigma2_cav))
    y = np.asarray(y, dtype=float)
    mu_cav = np.asarray(mu_cav, dtype=float)
    sigma2_cav = np.asarray(sigma2_cav, dtype=float)
    denom = np.sqrt(1.0 + sigma2_cav)
    z = y * mu_cav / denom
    ratio = inv_mills(z)
    mu_hat = mu_cav + y * sigma2_cav * ratio / denom
    sigma2_hat = sigma2_cav - sigma2_cav ** 2 * ratio / (1.0 + sigma2_cav) * (z + ratio)
    return TiltedMoments(log_ndtr(z), mu_hat, sigma2_hat)


def _probit_moments_scalar(y: float, mu_cav: float, sigma2_cav: float) -> TiltedMoments:
    # same arithmetic as the array path without the per-call array overhead
    denom = math.sqrt(1.0 + sigma2_cav)
    z = y * mu_cav / denom
    log_phi_z = float(log_ndtr(z))
    ratio = math.exp(-0.5 * z * z - _LOG_SQRT_2PI - log_phi_z)
    mu_hat = mu_cav + y * sigma2_cav * ratio / denom
    sigma2_hat = sigma2_cav - sigma2_cav ** 2 * ratio / (1.0 + sigma2_cav) * (z + ratio)
    return TiltedMoments(log_phi_z, mu_hat, sigma2_hat)


class Probit:
    """``p(y = 1 | f) = Phi(f)``."""

    def tilted_moments(self, y, mu_cav, sigma2_cav) -> TiltedMoments:
        return probit_moments(y, mu_cav, sigma2_cav)

    def predictive_prob(self, mu, sigma2):
        """Class +1 probability under a Gaussian latent marginal."""
        return ndtr(np.asarray(mu) / np.sqrt(1.0 + np.asarray(sigma2)))

    def log_predictive(self, y, mu, sigma2):
        return log_ndtr(np.asarray(y) * np.asarray(mu) / np.sqrt(1.0 + np.asarray(sigma2)))
