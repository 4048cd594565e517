"""Shared numerical guards and stable log-likelihood pieces.

All stabilisation thresholds live here.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, gammaln, log_expit

# Linear predictors are clipped to this range inside exponentials only.
ETA_CLAMP = 35.0


def clamp_exp(eta):
    """``exp(eta)`` with ``eta`` clipped to ``[-ETA_CLAMP, ETA_CLAMP]``."""
    return np.exp(np.clip(eta, -ETA_CLAMP, ETA_CLAMP))


def bernoulli_loglik_terms(z, eta):
    """``z eta - log(1 + e^eta)`` per site, computed without overflow."""
    return z * eta - np.logaddexp(0.0, eta)


def poisson_loglik_terms(z, eta, constant: bool = False):
    """``z eta - e^eta`` per site (``- log z!`` if ``constant``)."""
    out = z * eta - clamp_exp(eta)
    if constant:
        out = out - gammaln(z + 1.0)
    return out


def _extended_cutoffs(theta, J):
    theta = np.asarray(theta, dtype=float)
    if theta.size != J - 1:
        raise ValueError(f"expected {J - 1} cutoffs for J={J}, got {theta.size}")
    return np.concatenate([[-np.inf], theta, [np.inf]])


def ordinal_logpmf(z, eta, theta, J):
    """``log P(Z = z)`` under the cumulative logit, stable in both tails.

    With ``x = theta_z - eta`` and ``y = theta_{z-1} - eta``,
    ``log P = log F(x) + log(1 - F(y)) + log(1 - e^{y - x})``.
    """
    ext = _extended_cutoffs(theta, J)
    z = np.asarray(z, dtype=int)
    x = ext[z] - eta
    y = ext[z - 1] - eta
    return log_expit(x) + log_expit(-y) + np.log(-np.expm1(y - x))


def ordinal_logpmf_parts(z, eta, theta, J):
    """Log-probabilities and first/second derivatives in ``(x, y)``.

    Returns ``lp, gx, gy, gxx, gyy, gxy`` per site.  ``gx`` vanishes for the
    top category and ``gy`` for the bottom one.
    """
    ext = _extended_cutoffs(theta, J)
    z = np.asarray(z, dtype=int)
    x = ext[z] - eta
    y = ext[z - 1] - eta
    with np.errstate(invalid="ignore"):
        lx, lmy = log_expit(x), log_expit(-y)
        l1 = np.log(-np.expm1(y - x))
        lp = lx + lmy + l1
        denom = -np.expm1(y - x)
        a = np.exp(log_expit(-x) - lmy) / denom
        b = -np.exp(log_expit(y) - lx) / denom
    a = np.where(np.isposinf(x), 0.0, a)
    b = np.where(np.isneginf(y), 0.0, b)
    Fx = np.where(np.isposinf(x), 1.0, expit(x))
    Fy = np.where(np.isneginf(y), 0.0, expit(y))
    gxx = a * (1.0 - 2.0 * Fx) - a * a
    gyy = b * (1.0 - 2.0 * Fy) - b * b
    gxy = -a * b
    return lp, a, b, gxx, gyy, gxy
