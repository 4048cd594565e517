"""Matérn covariances and synthetic data for the four study designs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

from .exceptions import CovarianceSingularError

SUPPORTED_NU = (0.5, 1.5, 2.5, np.inf)
GP_JITTER = 1e-10
FAMILIES = ("binary", "count", "svc", "ordinal")


@dataclass(frozen=True)
class MaternParams:
    """Matérn partial sill, range and smoothness."""

    sigma2: float = 1.0
    phi: float = 0.2
    nu: float = 2.5

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not self.phi > 0:
            raise ValueError(f"phi must be positive, got {self.phi}")
        if not any(self.nu == v for v in SUPPORTED_NU):
            raise ValueError(f"nu={self.nu} unsupported; choose one of 0.5, 1.5, 2.5, inf")


def matern(h, params: MaternParams):
    """Closed-form Matérn covariance at distance(s) ``h``."""
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("distances must be non-negative")
    s2, phi, nu = params.sigma2, params.phi, params.nu
    if nu == 0.5:
        return s2 * np.exp(-h / phi)
    if nu == 1.5:
        r = np.sqrt(3.0) * h / phi
        return s2 * (1.0 + r) * np.exp(-r)
    if nu == 2.5:
        r = np.sqrt(5.0) * h / phi
        return s2 * (1.0 + r + r * r / 3.0) * np.exp(-r)
    return s2 * np.exp(-h * h / (2.0 * phi * phi))


def matern_matrix(locations, params: MaternParams, other=None) -> np.ndarray:
    """Covariance matrix over ``locations`` (or cross-covariance with ``other``)."""
    s = np.asarray(locations, dtype=float)
    if other is None:
        return matern(squareform(pdist(s)), params)
    return matern(cdist(s, np.asarray(other, dtype=float)), params)


def _chol(C, jitter=GP_JITTER):
    n = C.shape[0]
    try:
        return np.linalg.cholesky(C + jitter * np.eye(n))
    except np.linalg.LinAlgError:
        raise CovarianceSingularError(
            f"Matérn covariance over {n} sites is not positive definite after "
            f"adding {jitter:g} to the diagonal; check for duplicate locations") from None


def sample_gp(locations, params: MaternParams, seed=None, *, rng=None) -> np.ndarray:
    """Draw a zero-mean Gaussian field ``W = L u`` at ``locations``."""
    if rng is None:
        rng = np.random.default_rng(seed)
    L = _chol(matern_matrix(locations, params))
    return L @ rng.standard_normal(L.shape[0])


def ordinal_probs(eta, theta) -> np.ndarray:
    """Category probabilities of the cumulative-logit model.

    ``gamma_j = logistic(theta_j - eta)``; returns shape ``(n, J)``.
    """
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    theta = np.asarray(theta, dtype=float)
    gamma = 1.0 / (1.0 + np.exp(-(theta[None, :] - eta[:, None])))
    cum = np.hstack([np.zeros((eta.size, 1)), gamma, np.ones((eta.size, 1))])
    return np.diff(cum, axis=1)


def check_cutoffs(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.size < 1:
        raise ValueError("cutoffs must be a non-empty vector")
    if theta[0] != 0.0:
        raise ValueError(f"first cutoff must be 0, got {theta[0]}")
    if np.any(np.diff(theta) <= 0):
        raise ValueError(f"cutoffs must be strictly increasing, got {theta.tolist()}")
    return theta


@dataclass
class Dataset:
    """Fit and validation split of a spatial dataset.

    Attributes
    ----------
    fit_locations, cv_locations : ndarray of shape (n, 2), (n_cv, 2)
    X, X_cv : ndarray of shape (n, k), (n_cv, k)
    z, z_cv : ndarray
        Responses; ordinal categories are coded ``1..J``.
    family : str
    latent : dict
        True latent fields over all ``n + n_cv`` sites (fit rows first).
    truth : dict
        Generating parameters.
    """

    fit_locations: np.ndarray
    cv_locations: np.ndarray
    X: np.ndarray
    X_cv: np.ndarray
    z: np.ndarray
    z_cv: np.ndarray
    family: str = "binary"
    latent: dict = field(default_factory=dict)
    truth: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if len(self.z) == 0 or len(self.z_cv) == 0:
            raise ValueError("both splits must be non-empty")
        if self.X.shape[1] != self.X_cv.shape[1]:
            raise ValueError("fit and cv designs have different column counts")
        for name, z in (("z", self.z), ("z_cv", self.z_cv)):
            z = np.asarray(z)
            if self.family == "binary" and not np.isin(z, (0, 1)).all():
                raise ValueError(f"{name}: binary responses must be 0/1")
            if self.family in ("count", "svc") and (np.any(z < 0) or np.any(z != np.round(z))):
                raise ValueError(f"{name}: counts must be non-negative integers")
            if self.family == "ordinal" and (np.any(z < 1) or np.any(z != np.round(z))):
                raise ValueError(f"{name}: ordinal categories must be integers >= 1")

    @property
    def n(self) -> int:
        return len(self.z)

    @property
    def n_cv(self) -> int:
        return len(self.z_cv)

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def all_locations(self) -> np.ndarray:
        return np.vstack([self.fit_locations, self.cv_locations])

    def to_csv(self, path) -> None:
        """Columns ``x, y, x1..xk, z, split``."""
        k = self.k
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", *[f"x{j + 1}" for j in range(k)], "z", "split"])
            for locs, X, z, tag in ((self.fit_locations, self.X, self.z, "fit"),
                                    (self.cv_locations, self.X_cv, self.z_cv, "cv")):
                for s, xr, zi in zip(locs, X, z):
                    zs = str(int(zi)) if float(zi).is_integer() else repr(float(zi))
                    w.writerow([repr(float(s[0])), repr(float(s[1])),
                                *[repr(float(v)) for v in xr], zs, tag])

    @classmethod
    def from_csv(cls, path, family: str = "binary") -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: no data rows")
        cols = list(rows[0].keys())
        missing = {"x", "y", "z", "split"} - set(cols)
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        xcols = sorted((c for c in cols if c.startswith("x") and c[1:].isdigit()),
                       key=lambda c: int(c[1:]))
        parts = {"fit": [], "cv": []}
        for i, r in enumerate(rows):
            tag = r["split"].strip()
            if tag not in parts:
                raise ValueError(f"{path}: row {i + 2} has split {tag!r}; expected fit or cv")
            parts[tag].append(r)

        def unpack(rs):
            locs = np.array([[float(r["x"]), float(r["y"])] for r in rs]).reshape(-1, 2)
            X = np.array([[float(r[c]) for c in xcols] for r in rs]).reshape(len(rs), len(xcols))
            z = np.array([float(r["z"]) for r in rs])
            return locs, X, z

        s, X, z = unpack(parts["fit"])
        s_cv, X_cv, z_cv = unpack(parts["cv"])
        return cls(s, s_cv, X, X_cv, z, z_cv, family)


def _design(rng, n_total, k):
    locs = rng.uniform(size=(n_total, 2))
    X = rng.standard_normal((n_total, k))
    return locs, X


def _split(n, arr):
    return arr[:n], arr[n:]


def _base(n, n_cv, beta, params, seed):
    if n <= 0 or n_cv <= 0:
        raise ValueError("n and n_cv must be positive")
    beta = np.asarray(beta, dtype=float)
    rng = np.random.default_rng(seed)
    locs, X = _design(rng, n + n_cv, beta.size)
    W = sample_gp(locs, params, rng=rng)
    return rng, beta, locs, X, W


def _assemble(n, locs, X, z, family, latent, truth):
    s, s_cv = _split(n, locs)
    Xf, Xc = _split(n, X)
    zf, zc = _split(n, z)
    return Dataset(s, s_cv, Xf, Xc, zf, zc, family, latent, truth)


def gen_binary(n=1000, n_cv=400, beta=(1.0, 1.0), params=MaternParams(), seed=0,
               nugget: float = 0.0) -> Dataset:
    """Bernoulli responses with logit link over a Matérn field.

    Sites are uniform on the unit square and covariates i.i.d. standard
    normal; all ``n + n_cv`` sites share one latent draw.
    """
    rng, beta, locs, X, W = _base(n, n_cv, beta, params, seed)
    eta = X @ beta + W
    if nugget > 0:
        eta = eta + np.sqrt(nugget) * rng.standard_normal(eta.size)
    z = rng.binomial(1, 1.0 / (1.0 + np.exp(-eta))).astype(float)
    truth = {"beta": beta.tolist(), "params": params.__dict__.copy()}
    return _assemble(n, locs, X, z, "binary", {"W": W, "eta": eta}, truth)


def gen_count(n=1000, n_cv=400, beta=(1.0, 1.0), params=MaternParams(), seed=0,
              nugget: float = 0.0) -> Dataset:
    """Poisson responses with log link over a Matérn field."""
    rng, beta, locs, X, W = _base(n, n_cv, beta, params, seed)
    eta = X @ beta + W
    if nugget > 0:
        eta = eta + np.sqrt(nugget) * rng.standard_normal(eta.size)
    z = rng.poisson(np.exp(eta)).astype(float)
    truth = {"beta": beta.tolist(), "params": params.__dict__.copy()}
    return _assemble(n, locs, X, z, "count", {"W": W, "eta": eta}, truth)


def gen_ordinal(n=1000, n_cv=400, beta=(1.0, 1.0), theta=(0.0, 1.0, 2.0),
                params=MaternParams(), seed=0, nugget: float = 0.0) -> Dataset:
    """Cumulative-logit responses in ``1..J`` with ``J = len(theta) + 1``."""
    theta = check_cutoffs(theta)
    rng, beta, locs, X, W = _base(n, n_cv, beta, params, seed)
    eta = X @ beta + W
    if nugget > 0:
        eta = eta + np.sqrt(nugget) * rng.standard_normal(eta.size)
    P = ordinal_probs(eta, theta)
    u = rng.uniform(size=eta.size)
    z = 1.0 + (u[:, None] > np.cumsum(P, axis=1)[:, :-1]).sum(axis=1)
    truth = {"beta": beta.tolist(), "theta": theta.tolist(),
             "alpha": np.log(np.diff(theta)).tolist(), "params": params.__dict__.copy()}
    return _assemble(n, locs, X, z, "ordinal", {"W": W, "eta": eta}, truth)


def sample_svc_fields(locations, params: MaternParams, T, rng):
    """Joint draw of ``(W, B)`` with covariance ``R kron T``.

    Uses ``chol(R) kron chol(T)`` without forming the Kronecker product:
    with ``U`` an ``n x 2`` standard normal matrix, ``L_R U L_T'`` has rows
    ``(w_i, b_i)``.
    """
    T = np.asarray(T, dtype=float)
    if T.shape != (2, 2) or not np.allclose(T, T.T):
        raise ValueError("T must be a symmetric 2x2 matrix")
    try:
        LT = np.linalg.cholesky(T)
    except np.linalg.LinAlgError:
        raise ValueError("T must be positive definite") from None
    unit = MaternParams(1.0, params.phi, params.nu)
    LR = _chol(matern_matrix(locations, unit))
    U = rng.standard_normal((LR.shape[0], 2))
    F = LR @ U @ LT.T
    return F[:, 0], F[:, 1]


def gen_svc(n=1000, n_cv=400, beta=(1.0, 1.0), T=((1.0, 0.3), (0.3, 0.2)),
            params=MaternParams(), seed=0) -> Dataset:
    """Poisson responses with a spatially varying slope on the first covariate.

    ``eta = X beta + X1 * B + W`` where ``(W, B)`` is a bivariate Matérn
    field with correlation ``R(phi, nu)`` and cross-covariance ``T``.
    """
    if n <= 0 or n_cv <= 0:
        raise ValueError("n and n_cv must be positive")
    beta = np.asarray(beta, dtype=float)
    rng = np.random.default_rng(seed)
    locs, X = _design(rng, n + n_cv, beta.size)
    W, B = sample_svc_fields(locs, params, T, rng)
    eta = X @ beta + X[:, 0] * B + W
    z = rng.poisson(np.exp(eta)).astype(float)
    truth = {"beta": beta.tolist(), "T": np.asarray(T).tolist(), "params": params.__dict__.copy()}
    return _assemble(n, locs, X, z, "svc", {"W": W, "B": B, "eta": eta}, truth)


GENERATORS = {"binary": gen_binary, "count": gen_count, "ordinal": gen_ordinal, "svc": gen_svc}
