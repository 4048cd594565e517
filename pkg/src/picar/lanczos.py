"""Thick-restart Lanczos for the largest eigenpairs of a symmetric operator."""

from __future__ import annotations

import numpy as np

from .exceptions import EigensolverError


def _orthogonalize(V, w, passes=2):
    for _ in range(passes):
        w -= V @ (V.T @ w)
    return w


def thick_restart_lanczos(matvec, n, k, *, ncv=None, tol=1e-12, max_restarts=500,
                          v0=None, seed=0, deflate=None):
    """Compute the ``k`` algebraically largest eigenpairs of a symmetric operator.

    The Krylov basis is fully reorthogonalised.  After each sweep the
    Rayleigh-Ritz problem on the basis is solved, the leading Ritz vectors
    are kept (thick restart) and the expansion continues from the residual
    direction.

    Parameters
    ----------
    matvec : callable
        ``matvec(X)`` applies the operator to an (n,) or (n, b) array.
    n : int
        Operator dimension.
    k : int
        Number of eigenpairs wanted.
    ncv : int, optional
        Maximum basis size; defaults to ``max(2k + 1, k + 32)`` capped at n.
    tol : float
        Convergence when every wanted residual norm is below
        ``tol * max|theta|``.
    v0 : ndarray, optional
        Starting vector.  Drawn from ``seed`` when omitted.
    deflate : ndarray of shape (n, d), optional
        Orthonormal vectors kept out of the Krylov space (e.g. known null
        vectors of the operator).

    Returns
    -------
    values : ndarray of shape (k,)
        Non-increasing.
    vectors : ndarray of shape (n, k)
    """
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    if ncv is None:
        ncv = max(2 * k + 1, k + 32)
    ncv = min(ncv, n - (0 if deflate is None else deflate.shape[1]))
    if ncv <= k:
        raise ValueError("basis size must exceed the number of wanted pairs")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n) if v0 is None else np.array(v0, dtype=float)
    if deflate is not None:
        v = _orthogonalize(deflate, v)
    v /= np.linalg.norm(v)

    V = np.empty((n, ncv))
    AV = np.empty((n, ncv))
    j = 0  # number of basis vectors currently held
    keep = min(k + (ncv - k) // 2, ncv - 1)
    resid = np.inf
    for _ in range(max_restarts):
        while j < ncv:
            V[:, j] = v
            AV[:, j] = matvec(v)
            j += 1
            if j == ncv:
                break
            w = AV[:, j - 1].copy()
            if deflate is not None:
                w = _orthogonalize(deflate, w)
            w = _orthogonalize(V[:, :j], w)
            nrm = np.linalg.norm(w)
            if nrm < 1e-13 * max(1.0, np.abs(AV[:, :j]).max()):
                # Invariant subspace found: restart with a fresh random direction.
                w = rng.standard_normal(n)
                if deflate is not None:
                    w = _orthogonalize(deflate, w)
                w = _orthogonalize(V[:, :j], w)
                nrm = np.linalg.norm(w)
            v = w / nrm
        T = V.T @ AV
        T = 0.5 * (T + T.T)
        theta, Y = np.linalg.eigh(T)
        theta, Y = theta[::-1], Y[:, ::-1]
        X = V @ Y[:, :keep]
        AX = AV @ Y[:, :keep]
        R = AX[:, :k] - X[:, :k] * theta[:k]
        res = np.linalg.norm(R, axis=0)
        scale = max(np.abs(theta).max(), 1e-300)
        resid = res.max() / scale
        if resid <= tol:
            return theta[:k].copy(), X[:, :k].copy()
        # Residual direction of the last basis vector continues the expansion.
        w = AV[:, ncv - 1] - V @ (V.T @ AV[:, ncv - 1])
        if deflate is not None:
            w = _orthogonalize(deflate, w)
        V[:, :keep] = X
        AV[:, :keep] = AX
        w = _orthogonalize(V[:, :keep], w)
        nrm = np.linalg.norm(w)
        if nrm < 1e-13 * scale:
            w = rng.standard_normal(n)
            if deflate is not None:
                w = _orthogonalize(deflate, w)
            w = _orthogonalize(V[:, :keep], w)
            nrm = np.linalg.norm(w)
        v = w / nrm
        j = keep
    raise EigensolverError(f"Lanczos did not converge after {max_restarts} restarts", resid)
