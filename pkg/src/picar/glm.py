"""Maximum-likelihood GLMs (logit, log, cumulative logit) and the rank heuristic."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .exceptions import SelectionFailedError
from .numerics import ETA_CLAMP, clamp_exp, ordinal_logpmf_parts

MAX_ITER = 100
DEV_TOL = 1e-8
GRAD_TOL = 1e-6
RIDGE = 1e-8
COND_LIMIT = 1e12


@dataclass
class GlmFit:
    """Result of a maximum-likelihood fit.

    Attributes
    ----------
    coef : ndarray
        All coefficients.  For the cumulative logit these are
        ``(alpha_2..alpha_{J-1}, beta)``.
    cov : ndarray
        Inverse observed information in the same parametrisation.
    converged : bool
    n_iter : int
    deviance : float
    grad_norm : float
    family : str
    ridge : bool
        Whether the ridge fallback was needed.
    n_alpha : int
        Number of leading cutoff coefficients (0 for logit/log).
    """

    coef: np.ndarray
    cov: np.ndarray
    converged: bool
    n_iter: int
    deviance: float
    grad_norm: float
    family: str
    ridge: bool = False
    n_alpha: int = 0
    deviance_path: list = field(default_factory=list, repr=False)

    @property
    def alpha(self) -> np.ndarray:
        return self.coef[:self.n_alpha]

    @property
    def beta(self) -> np.ndarray:
        return self.coef[self.n_alpha:]

    @property
    def theta(self) -> np.ndarray:
        return alpha_to_theta(self.alpha)

    def conditional_cov(self, idx) -> np.ndarray:
        """Covariance of ``coef[idx]`` given every other coefficient."""
        info = _safe_inv(self.cov)
        sub = info[np.ix_(idx, idx)]
        return _safe_inv(sub)


def _safe_inv(A):
    A = 0.5 * (A + A.T)
    try:
        L = np.linalg.cholesky(A)
        Li = np.linalg.inv(L)
        return Li.T @ Li
    except np.linalg.LinAlgError:
        return np.linalg.pinv(A, hermitian=True)


def _solve_spd(H, g):
    """Solve ``H x = g``; falls back to ``H + RIDGE I`` when ill-conditioned."""
    try:
        L = np.linalg.cholesky(H)
        d = np.diag(L)
        if (d.max() / d.min()) ** 2 < COND_LIMIT:
            return np.linalg.solve(L.T, np.linalg.solve(L, g)), False
    except np.linalg.LinAlgError:
        pass
    Hr = H + RIDGE * np.eye(H.shape[0])
    try:
        return np.linalg.solve(Hr, g), True
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(Hr, g, rcond=None)[0], True


# ---------------------------------------------------------------------------
# Logit / log IRLS
# ---------------------------------------------------------------------------


def _glm_terms(family, X, z, b):
    eta = X @ b
    if family == "logit":
        mu = expit(eta)
        w = mu * (1.0 - mu)
        ll = float(np.sum(z * log_expit(eta) + (1.0 - z) * log_expit(-eta)))
    elif family == "log":
        mu = clamp_exp(eta)
        w = mu
        eta_c = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
        ll = float(np.sum(z * eta_c - mu))
    else:
        raise ValueError(f"unknown GLM family {family!r}; use 'logit' or 'log'")
    return mu, w, ll


def _saturated(family, z):
    if family == "logit":
        return 0.0
    pos = z > 0
    return float(np.sum(z[pos] * np.log(z[pos]) - z[pos]))


def irls_fit(family: str, X, z, *, max_iter: int = MAX_ITER, tol: float = DEV_TOL,
             start=None) -> GlmFit:
    """Newton / IRLS for the canonical logit or log link.

    Iterates until the relative deviance change is at most ``tol`` or
    ``max_iter`` iterations.  Separation and divergence are reported through
    ``converged=False`` rather than raised.

    Parameters
    ----------
    family : {"logit", "log"}
    X : ndarray of shape (n, d)
    z : ndarray of shape (n,)
    """
    X = np.asarray(X, dtype=float)
    z = np.asarray(z, dtype=float)
    n, d = X.shape
    if z.shape != (n,):
        raise ValueError("X and z have inconsistent lengths")
    b = np.zeros(d) if start is None else np.array(start, dtype=float)
    sat = _saturated(family, z)
    mu, w, ll = _glm_terms(family, X, z, b)
    dev = 2.0 * (sat - ll)
    path = [dev]
    converged = False
    used_ridge = False
    it = 0
    for it in range(1, max_iter + 1):
        H = X.T @ (w[:, None] * X)
        g = X.T @ (z - mu)
        step, rid = _solve_spd(H, g)
        used_ridge |= rid
        # Step halving keeps the deviance non-increasing.
        t = 1.0
        for _ in range(30):
            b_new = b + t * step
            mu_n, w_n, ll_n = _glm_terms(family, X, z, b_new)
            if np.isfinite(ll_n) and ll_n >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            break
        b, mu, w = b_new, mu_n, w_n
        dev_new = 2.0 * (sat - ll_n)
        change = abs(dev - dev_new) / (abs(dev_new) + 0.1)
        ll, dev = ll_n, dev_new
        path.append(dev)
        if change <= tol:
            converged = True
            break
    H = X.T @ (w[:, None] * X)
    grad = X.T @ (z - mu)
    gnorm = float(np.linalg.norm(grad))
    if converged:
        # Newton polish; flag if the optimum is still not reached.
        for _ in range(5):
            if gnorm <= GRAD_TOL:
                break
            step, _ = _solve_spd(H, grad)
            mu_t, w_t, ll_t = _glm_terms(family, X, z, b + step)
            g_t = X.T @ (z - mu_t)
            if not (ll_t >= ll - 1e-12 * abs(ll) and np.linalg.norm(g_t) < gnorm):
                break
            b, mu, w, ll, grad = b + step, mu_t, w_t, ll_t, g_t
            dev = 2.0 * (sat - ll)
            H = X.T @ (w[:, None] * X)
            gnorm = float(np.linalg.norm(grad))
        converged = gnorm <= GRAD_TOL
    if np.abs(X @ b).max(initial=0.0) > ETA_CLAMP:
        converged = False
    cond_ok = True
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        cond_ok = False
    if not cond_ok:
        H = H + RIDGE * np.eye(d)
        used_ridge = True
    cov = _safe_inv(H)
    return GlmFit(b, cov, converged, it, float(dev), gnorm, family, used_ridge, 0, path)


def glm_predict(fit: GlmFit, X) -> np.ndarray:
    """Response-scale prediction (probability or rate)."""
    eta = np.asarray(X, dtype=float) @ fit.beta
    if fit.family == "logit":
        return expit(eta)
    if fit.family == "log":
        return clamp_exp(eta)
    P = _cum_probs(eta, fit.theta)
    return P


# ---------------------------------------------------------------------------
# Cumulative logit
# ---------------------------------------------------------------------------


def alpha_to_theta(alpha) -> np.ndarray:
    """``theta_1 = 0`` and ``theta_j = sum_{i=2..j} exp(alpha_i)``."""
    alpha = np.asarray(alpha, dtype=float)
    return np.concatenate([[0.0], np.cumsum(np.exp(alpha))])


def theta_to_alpha(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    return np.log(np.diff(theta))


def _cum_probs(eta, theta):
    gamma = expit(theta[None, :] - np.asarray(eta)[:, None])
    n = gamma.shape[0]
    cum = np.hstack([np.zeros((n, 1)), gamma, np.ones((n, 1))])
    return np.diff(cum, axis=1)


def _check_categories(z, J):
    z = np.asarray(z)
    if np.any(z != np.round(z)) or np.any(z < 1) or np.any(z > J):
        raise ValueError(f"ordinal responses must be integers in 1..{J}")
    z = z.astype(int)
    missing = sorted(set(range(1, J + 1)) - set(np.unique(z).tolist()))
    if missing:
        raise ValueError(f"categories never observed: {missing}")
    return z


def _cumlogit_derivs(theta_free, beta, X, z, J, hessian=True):
    """Log-likelihood, gradient and Hessian in ``(theta_2..theta_{J-1}, beta)``."""
    theta = np.concatenate([[0.0], theta_free])
    eta = X @ beta
    lp, gx, gy, gxx, gyy, gxy = ordinal_logpmf_parts(z, eta, theta, J)
    ll = float(lp.sum())
    n, k = X.shape
    nt = J - 2
    # theta_c (c in 2..J-1) sits at column c-2
    Jx = np.zeros((n, nt + k))
    Jy = np.zeros((n, nt + k))
    rows = np.arange(n)
    cx = z - 2
    mx = (z >= 2) & (z <= J - 1)
    Jx[rows[mx], cx[mx]] = 1.0
    cy = z - 3
    my = (z - 1 >= 2) & (z - 1 <= J - 1)
    Jy[rows[my], cy[my]] = 1.0
    Jx[:, nt:] = -X
    Jy[:, nt:] = -X
    grad = Jx.T @ gx + Jy.T @ gy
    if not hessian:
        return ll, grad, None
    H = (Jx.T @ (gxx[:, None] * Jx) + Jy.T @ (gyy[:, None] * Jy)
         + Jx.T @ (gxy[:, None] * Jy) + Jy.T @ (gxy[:, None] * Jx))
    return ll, grad, 0.5 * (H + H.T)


def cumlogit_loglik(alpha, beta, X, z, J) -> float:
    """Log-likelihood in the unconstrained cutoff parametrisation."""
    z = np.asarray(z).astype(int)
    theta = alpha_to_theta(alpha)
    ll, _, _ = _cumlogit_derivs(theta[1:], np.asarray(beta, float), np.asarray(X, float),
                                z, J, hessian=False)
    return ll


def cumlogit_grad(alpha, beta, X, z, J) -> np.ndarray:
    """Gradient of :func:`cumlogit_loglik` with respect to ``(alpha, beta)``."""
    z = np.asarray(z).astype(int)
    alpha = np.asarray(alpha, dtype=float)
    theta = alpha_to_theta(alpha)
    _, g, _ = _cumlogit_derivs(theta[1:], np.asarray(beta, float), np.asarray(X, float),
                               z, J, hessian=False)
    nt = J - 2
    g_theta = g[:nt]
    # d theta_j / d alpha_i = exp(alpha_i) for j >= i
    g_alpha = np.exp(alpha) * np.cumsum(g_theta[::-1])[::-1]
    return np.concatenate([g_alpha, g[nt:]])


def cumlogit_fit(X, z, J: int, *, max_iter: int = MAX_ITER, tol: float = 1e-12) -> GlmFit:
    """Proportional-odds model ``logit P(z <= j) = theta_j - x'beta`` with ``theta_1 = 0``.

    Newton's method runs on the (concave) likelihood in ``theta``; the
    result is reported in the unconstrained ``alpha`` parametrisation with a
    delta-method covariance.

    Raises
    ------
    ValueError
        If some category in ``1..J`` is never observed.
    """
    if J < 2:
        raise ValueError("need at least two categories")
    X = np.asarray(X, dtype=float)
    z = _check_categories(z, J)
    n, k = X.shape
    nt = J - 2
    cum = np.cumsum(np.bincount(z, minlength=J + 1)[1:])[:-1] / n
    lg = np.log(cum / (1.0 - cum))
    par = np.concatenate([(lg - lg[0])[1:], np.zeros(k)])
    ll, g, H = _cumlogit_derivs(par[:nt], par[nt:], X, z, J)
    path = [-2.0 * ll]
    converged = False
    used_ridge = False
    it = 0
    for it in range(1, max_iter + 1):
        step, rid = _solve_spd(-H, g)
        used_ridge |= rid
        t = 1.0
        ok = False
        for _ in range(40):
            cand = par + t * step
            th = np.concatenate([[0.0], cand[:nt]])
            if np.all(np.diff(th) > 0):
                ll_c, g_c, H_c = _cumlogit_derivs(cand[:nt], cand[nt:], X, z, J)
                if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * abs(ll):
                    ok = True
                    break
            t *= 0.5
        if not ok:
            break
        change = abs(ll_c - ll) / (abs(ll_c) + 0.1)
        par, ll, g, H = cand, ll_c, g_c, H_c
        path.append(-2.0 * ll)
        gn = np.linalg.norm(g)
        if gn <= 1e-3 * GRAD_TOL or (gn <= GRAD_TOL and change <= tol):
            converged = True
            break
    theta = np.concatenate([[0.0], par[:nt]])
    alpha = theta_to_alpha(theta)
    info = -H
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        info = info + RIDGE * np.eye(info.shape[0])
        used_ridge = True
    cov_theta = _safe_inv(info)
    # Jacobian of (theta_free, beta) with respect to (alpha, beta)
    G = np.eye(nt + k)
    G[:nt, :nt] = np.tril(np.ones((nt, nt))) * np.exp(alpha)[None, :]
    Gi = np.linalg.inv(G)
    cov = Gi @ cov_theta @ Gi.T
    coef = np.concatenate([alpha, par[nt:]])
    gnorm = float(np.linalg.norm(cumlogit_grad(alpha, par[nt:], X, z, J)))
    if np.abs(X @ par[nt:]).max(initial=0.0) > ETA_CLAMP:
        converged = False
    return GlmFit(coef, 0.5 * (cov + cov.T), converged, it, -2.0 * ll, gnorm,
                  "cumlogit", used_ridge, nt, path)


def cumlogit_predict_probs(fit: GlmFit, X) -> np.ndarray:
    return _cum_probs(np.asarray(X, float) @ fit.beta, fit.theta)


# ---------------------------------------------------------------------------
# Rank selection
# ---------------------------------------------------------------------------


@dataclass
class RankSelection:
    """Out-of-sample error per candidate rank.

    Attributes
    ----------
    grid : list of int
    cvmspe : ndarray
        Error per rank; ``inf`` where the fit did not converge.  For ordinal
        responses this is the misprediction rate.
    chosen : int
    fit : GlmFit
        The GLM at the chosen rank.
    """

    grid: list
    cvmspe: np.ndarray
    chosen: int
    fit: GlmFit | None = None
    converged: np.ndarray | None = None

    def table(self):
        return list(zip(self.grid, self.cvmspe.tolist()))


def default_grid(P: int = 200, full: bool = False) -> list:
    """Every integer in ``[2, min(P, 50)]`` then steps of 5 up to ``P``."""
    if P < 2:
        raise ValueError("P must be at least 2")
    if full:
        return list(range(2, P + 1))
    grid = list(range(2, min(P, 50) + 1))
    grid += list(range(55, P + 1, 5))
    if grid[-1] != P:
        grid.append(P)
    return grid


def augmented_design(family, X, AM_p):
    """``[X | AM_p]``; the SVC family adds the slope columns ``X1 * AM_p``."""
    if family == "svc":
        return np.hstack([X, AM_p, X[:, [0]] * AM_p])
    return np.hstack([X, AM_p])


def _fit_family(family, Xt, z, J):
    if family == "binary":
        return irls_fit("logit", Xt, z)
    if family in ("count", "svc"):
        return irls_fit("log", Xt, z)
    if family == "ordinal":
        return cumlogit_fit(Xt, z, J)
    raise ValueError(f"unknown family {family!r}")


def _score(family, fit, Xt_cv, z_cv):
    from .evaluate import cvmspe, mpr

    if not fit.converged:
        return np.inf
    if family == "ordinal":
        P = cumlogit_predict_probs(fit, Xt_cv)
        return mpr(z_cv, 1 + np.argmax(P, axis=1))
    return cvmspe(z_cv, glm_predict(fit, Xt_cv))


def _eval_rank(family, p, X, z, AM, X_cv, z_cv, AM_cv, J):
    Xt = augmented_design(family, X, AM[:, :p])
    Xt_cv = augmented_design(family, X_cv, AM_cv[:, :p])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fit = _fit_family(family, Xt, z, J)
        score = _score(family, fit, Xt_cv, z_cv)
    return score, fit.converged


def select_rank(X, z, AM, X_cv, z_cv, AM_cv, *, family: str = "binary", grid=None,
                J: int | None = None, n_jobs: int = 1) -> RankSelection:
    """Choose the basis rank by held-out error of the augmented GLM.

    For each ``p`` in ``grid`` the GLM of ``family`` is fit on
    ``[X | AM[:, :p]]`` and scored on the validation rows; the smallest
    error wins, ties going to the lowest rank.

    Raises
    ------
    SelectionFailedError
        If no fit in the grid converges.
    """
    AM = np.asarray(AM, dtype=float)
    AM_cv = np.asarray(AM_cv, dtype=float)
    P = AM.shape[1]
    grid = default_grid(P) if grid is None else sorted(set(int(g) for g in grid))
    if not grid or grid[0] < 2 or grid[-1] > P:
        raise ValueError(f"rank grid must lie in [2, {P}]")
    if family == "ordinal" and J is None:
        J = int(max(np.max(z), np.max(z_cv)))
    args = (np.asarray(X, float), np.asarray(z, float), AM, np.asarray(X_cv, float),
            np.asarray(z_cv, float), AM_cv, J)
    if n_jobs == 1:
        res = [_eval_rank(family, p, *args) for p in grid]
    else:
        from joblib import Parallel, delayed
        res = Parallel(n_jobs=n_jobs)(delayed(_eval_rank)(family, p, *args) for p in grid)
    scores = np.array([r[0] for r in res], dtype=float)
    conv = np.array([r[1] for r in res], dtype=bool)
    if not np.isfinite(scores).any():
        raise SelectionFailedError(f"no GLM converged on the rank grid {grid[0]}..{grid[-1]}")
    best = int(np.argmin(scores))  # argmin returns the first, i.e. lowest, rank on ties
    chosen = grid[best]
    assert all(scores[best] <= s for s in scores)
    fit = _fit_family(family, augmented_design(family, args[0], AM[:, :chosen]), args[1], J)
    return RankSelection(grid, scores, chosen, fit, conv)
