"""Adaptive Metropolis-within-Gibbs samplers for the basis-expanded spatial GLMMs.

One sweep updates, in order: the fixed effects (multivariate random-walk
proposal shaped by the GLM covariance), the basis coefficients (one
all-at-once isotropic random walk per field), the precisions (conjugate
Gamma draws) and, for ordinal responses, each free cutoff.
"""

from __future__ import annotations

import json
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .basis import PrecisionKernel
from .exceptions import NonFiniteLikelihoodError
from .glm import alpha_to_theta
from .numerics import bernoulli_loglik_terms, ordinal_logpmf, poisson_loglik_terms

BETA_PRIOR_VAR = 100.0
TAU_SHAPE = 0.5
TAU_RATE = 2000.0
TARGET_BLOCK = 0.234
TARGET_SCALAR = 0.44
ADAPT_EXPONENT = 0.6
SCALE_FLOOR = 1e-12
MODEL_FAMILIES = ("binary", "count", "svc", "ordinal")


def beta_names(k: int, intercept: bool = False) -> list:
    """``beta_1..`` for covariates; a trailing intercept is ``beta_0``."""
    names = [f"beta_{j + 1}" for j in range(k - int(intercept))]
    return names + ["beta_0"] if intercept else names


@dataclass
class ModelSpec:
    """Everything a sampler needs besides the responses.

    Parameters
    ----------
    family : {"binary", "count", "svc", "ordinal"}
    X : ndarray of shape (n, k)
    AM : ndarray of shape (n, p)
        Basis evaluated at the fit locations.
    kernel : PrecisionKernel
        Reduced prior precision ``K`` (p x p) shared by every field.
    J : int, optional
        Number of ordinal categories.
    intercept : bool
        The last column of ``X`` is a constant.  The basis is orthogonal to
        constants, so without it a nonzero field mean leaks into ``beta``.
    """

    family: str
    X: np.ndarray
    AM: np.ndarray
    kernel: PrecisionKernel
    J: int | None = None
    intercept: bool = False
    mu_beta: np.ndarray | None = None
    Sigma_beta: np.ndarray | None = None
    a_tau: float = TAU_SHAPE
    b_tau: float = TAU_RATE
    a_tau2: float = TAU_SHAPE
    b_tau2: float = TAU_RATE

    def __post_init__(self):
        if self.family not in MODEL_FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {MODEL_FAMILIES}")
        self.X = np.ascontiguousarray(self.X, dtype=float)
        self.AM = np.ascontiguousarray(self.AM, dtype=float)
        n, k = self.X.shape
        if self.AM.shape[0] != n:
            raise ValueError(f"AM has {self.AM.shape[0]} rows but X has {n}")
        if self.AM.shape[1] != self.kernel.K.shape[0]:
            raise ValueError(
                f"AM has {self.AM.shape[1]} columns but K is {self.kernel.K.shape[0]}-dimensional")
        if self.intercept and not np.all(self.X[:, -1] == 1.0):
            raise ValueError("intercept=True needs a trailing column of ones in X")
        if self.mu_beta is None:
            self.mu_beta = np.zeros(k)
        if self.Sigma_beta is None:
            self.Sigma_beta = BETA_PRIOR_VAR * np.eye(k)
        self.mu_beta = np.asarray(self.mu_beta, dtype=float)
        self.Sigma_beta = np.asarray(self.Sigma_beta, dtype=float)
        try:
            self._Lb = np.linalg.cholesky(self.Sigma_beta)
        except np.linalg.LinAlgError:
            raise ValueError("Sigma_beta must be symmetric positive definite") from None
        if self.family == "ordinal":
            if self.J is None or self.J < 2:
                raise ValueError("ordinal family needs J >= 2")
        if min(self.a_tau, self.b_tau, self.a_tau2, self.b_tau2) <= 0:
            raise ValueError("Gamma hyperparameters must be positive")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def p(self) -> int:
        return self.AM.shape[1]

    @property
    def n_alpha(self) -> int:
        return self.J - 2 if self.family == "ordinal" else 0

    @property
    def beta_names(self) -> list:
        return beta_names(self.k, self.intercept)

    def log_prior_beta(self, beta) -> float:
        r = np.linalg.solve(self._Lb, beta - self.mu_beta)
        return -0.5 * float(r @ r)


@dataclass
class ChainState:
    """Current parameter values.

    ``delta``/``tau`` belong to the spatial random effect; ``delta_b`` and
    ``tau_b`` to the varying slope (svc only); ``alpha`` holds the free
    ordinal cutoffs ``alpha_2..alpha_{J-1}``.
    """

    beta: np.ndarray
    delta: np.ndarray
    tau: float = 1.0
    delta_b: np.ndarray | None = None
    tau_b: float | None = None
    alpha: np.ndarray | None = None

    def copy(self) -> "ChainState":
        c = lambda a: None if a is None else np.array(a, dtype=float)
        return ChainState(c(self.beta), c(self.delta), float(self.tau), c(self.delta_b),
                          None if self.tau_b is None else float(self.tau_b), c(self.alpha))

    @property
    def theta(self):
        return None if self.alpha is None else alpha_to_theta(self.alpha)


def initial_state(spec: ModelSpec, beta=None, delta=None, delta_b=None, alpha=None,
                  tau: float = 1.0) -> ChainState:
    k, p = spec.k, spec.p
    st = ChainState(np.zeros(k) if beta is None else np.array(beta, dtype=float),
                    np.zeros(p) if delta is None else np.array(delta, dtype=float), float(tau))
    if spec.family == "svc":
        st.delta_b = np.zeros(p) if delta_b is None else np.array(delta_b, dtype=float)
        st.tau_b = float(tau)
    if spec.family == "ordinal":
        st.alpha = np.zeros(spec.J - 2) if alpha is None else np.array(alpha, dtype=float)
    return st


# ---------------------------------------------------------------------------
# Likelihood
# ---------------------------------------------------------------------------


def linear_predictor(state: ChainState, spec: ModelSpec) -> np.ndarray:
    eta = spec.X @ state.beta + spec.AM @ state.delta
    if spec.family == "svc":
        eta = eta + spec.X[:, 0] * (spec.AM @ state.delta_b)
    return eta


def loglik_eta(family, eta, z, theta=None, J=None) -> float:
    """Log-likelihood given the linear predictor (additive constants dropped)."""
    if family == "binary":
        terms = bernoulli_loglik_terms(z, eta)
    elif family in ("count", "svc"):
        terms = poisson_loglik_terms(z, eta)
    elif family == "ordinal":
        terms = ordinal_logpmf(z, eta, theta, J)
    else:
        raise ValueError(f"unknown family {family!r}")
    total = float(terms.sum())
    if not np.isfinite(total):
        bad = np.flatnonzero(~np.isfinite(terms))
        raise NonFiniteLikelihoodError(int(bad[0]) if bad.size else -1)
    return total


def loglik(family: str, state: ChainState, spec: ModelSpec, z) -> float:
    """Log-likelihood of ``z`` at ``state``.

    Count families drop the ``-log z!`` constant.

    Raises
    ------
    NonFiniteLikelihoodError
        Carrying the index of the first offending site.
    """
    eta = linear_predictor(state, spec)
    return loglik_eta(family, eta, np.asarray(z), state.theta, spec.J)


def log_posterior(state: ChainState, spec: ModelSpec, z) -> float:
    """Unnormalised joint log posterior (flat prior on the cutoffs)."""
    K = spec.kernel
    p = spec.p
    lp = loglik(spec.family, state, spec, z) + spec.log_prior_beta(state.beta)
    lp += 0.5 * p * np.log(state.tau) - 0.5 * state.tau * K.quad(state.delta)
    lp += (spec.a_tau - 1) * np.log(state.tau) - spec.b_tau * state.tau
    if spec.family == "svc":
        lp += 0.5 * p * np.log(state.tau_b) - 0.5 * state.tau_b * K.quad(state.delta_b)
        lp += (spec.a_tau2 - 1) * np.log(state.tau_b) - spec.b_tau2 * state.tau_b
    return float(lp)


# ---------------------------------------------------------------------------
# Elementary updates
# ---------------------------------------------------------------------------


def mh_accept(log_ratio: float, rng) -> bool:
    """Metropolis rule: accept with probability ``min(1, exp(log_ratio))``."""
    if log_ratio >= 0:
        return True
    return bool(np.log(rng.uniform()) < log_ratio)


def gibbs_tau(delta, K, a_tau: float, b_tau: float, rng) -> float:
    """Draw ``tau ~ Gamma(a_tau + p/2, rate = b_tau + delta'K delta / 2)``."""
    delta = np.asarray(delta, dtype=float)
    if isinstance(K, PrecisionKernel):
        q = K.quad(delta)
    else:
        q = float(delta @ (np.asarray(K) @ delta))
    shape = a_tau + 0.5 * delta.size
    rate = b_tau + 0.5 * q
    return float(rng.gamma(shape, 1.0 / rate))


def proposal_factor(V) -> np.ndarray:
    """Lower Cholesky factor of ``V`` with its diagonal floored at ``SCALE_FLOOR``."""
    V = np.array(V, dtype=float, ndmin=2)
    V = 0.5 * (V + V.T)
    d = np.diag(V).copy()
    V[np.diag_indices_from(V)] = np.maximum(d, SCALE_FLOOR)
    try:
        return np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        return np.diag(np.sqrt(np.maximum(np.diag(V), SCALE_FLOOR)))


class _Cache:
    """Pieces of the linear predictor, refreshed blockwise."""

    def __init__(self, state, spec, z):
        self.xb = spec.X @ state.beta
        self.wd = spec.AM @ state.delta
        self.bd = (spec.X[:, 0] * (spec.AM @ state.delta_b)) if spec.family == "svc" else 0.0
        self.theta = state.theta
        self.ll = loglik_eta(spec.family, self.eta, z, self.theta, spec.J)

    @property
    def eta(self):
        return self.xb + self.wd + self.bd


def mh_beta(state, L_V, spec, z, rng, scale: float = 1.0, cache=None):
    """Random-walk MH for ``beta`` with proposal ``N(beta, scale^2 V)``.

    ``L_V`` is a Cholesky factor of ``V`` (see :func:`proposal_factor`).

    Returns
    -------
    state, accepted, accept_prob
    """
    if cache is None:
        cache = _Cache(state, spec, z)
    prop = state.beta + max(scale, SCALE_FLOOR) * (L_V @ rng.standard_normal(spec.k))
    xb = spec.X @ prop
    ll = loglik_eta(spec.family, xb + cache.wd + cache.bd, z, cache.theta, spec.J)
    lr = ll - cache.ll + spec.log_prior_beta(prop) - spec.log_prior_beta(state.beta)
    acc = mh_accept(lr, rng)
    if acc:
        state.beta = prop
        cache.xb, cache.ll = xb, ll
    return state, acc, float(min(1.0, np.exp(min(lr, 0.0))))


def mh_delta(state, step_scale: float, spec, z, rng, cache=None, which: str = "w"):
    """All-at-once random walk ``delta* = delta + step_scale * u`` for one field.

    ``which="w"`` moves the spatial effect, ``"b"`` the varying slope.
    """
    if step_scale <= 0:
        raise ValueError("step_scale must be positive")
    if cache is None:
        cache = _Cache(state, spec, z)
    K = spec.kernel
    cur = state.delta if which == "w" else state.delta_b
    tau = state.tau if which == "w" else state.tau_b
    prop = cur + max(step_scale, SCALE_FLOOR) * rng.standard_normal(spec.p)
    piece = spec.AM @ prop
    if which == "w":
        eta = cache.xb + piece + cache.bd
    else:
        piece = spec.X[:, 0] * piece
        eta = cache.xb + cache.wd + piece
    ll = loglik_eta(spec.family, eta, z, cache.theta, spec.J)
    lr = ll - cache.ll - 0.5 * tau * (K.quad(prop) - K.quad(cur))
    acc = mh_accept(lr, rng)
    if acc:
        if which == "w":
            state.delta, cache.wd = prop, piece
        else:
            state.delta_b, cache.bd = prop, piece
        cache.ll = ll
    return state, acc, float(min(1.0, np.exp(min(lr, 0.0))))


def mh_alpha(state, step_scales, spec, z, rng, cache=None):
    """Componentwise random walk on the free cutoffs (flat prior).

    Returns
    -------
    state, accepted : ndarray of bool, accept_probs : ndarray
    """
    if spec.family != "ordinal" or spec.J < 3:
        raise ValueError("cutoff updates need an ordinal model with J >= 3")
    if cache is None:
        cache = _Cache(state, spec, z)
    steps = np.broadcast_to(np.asarray(step_scales, dtype=float), state.alpha.shape)
    eta = cache.eta
    accepted = np.zeros(state.alpha.size, dtype=bool)
    probs = np.zeros(state.alpha.size)
    for j in range(state.alpha.size):
        prop = state.alpha.copy()
        prop[j] += max(steps[j], SCALE_FLOOR) * rng.standard_normal()
        theta = alpha_to_theta(prop)
        ll = loglik_eta("ordinal", eta, z, theta, spec.J)
        lr = ll - cache.ll
        probs[j] = min(1.0, np.exp(min(lr, 0.0)))
        if mh_accept(lr, rng):
            state.alpha, cache.theta, cache.ll = prop, theta, ll
            accepted[j] = True
        assert cache.theta[0] == 0.0 and np.all(np.diff(cache.theta) > 0), "cutoffs lost order"
    return state, accepted, probs


# ---------------------------------------------------------------------------
# Effective sample size
# ---------------------------------------------------------------------------


def autocorrelation(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0]


def ess(draws) -> float:
    """Effective sample size by the initial monotone positive sequence.

    A constant series returns 1 with a warning.
    """
    x = np.asarray(draws, dtype=float).ravel()
    n = x.size
    if n < 4:
        raise ValueError("need at least 4 draws")
    if np.ptp(x) == 0 or not np.isfinite(x).all():
        warnings.warn("constant or non-finite series; ESS set to 1", RuntimeWarning)
        return 1.0
    rho = autocorrelation(x)
    m = (n - 1) // 2
    gamma = rho[0:2 * m:2] + rho[1:2 * m:2]
    pos = np.flatnonzero(gamma <= 0)
    gamma = gamma[:pos[0]] if pos.size else gamma
    gamma = np.minimum.accumulate(gamma)
    tau = -1.0 + 2.0 * gamma.sum()
    return float(n / max(tau, 1e-12))


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


@dataclass
class ChainConfig:
    iterations: int = 20000
    burn_in: int = 5000
    thin: int = 1
    seed: int = 0
    adapt: bool = True

    def __post_init__(self):
        if not self.iterations > self.burn_in >= 0:
            raise ValueError("need iterations > burn_in >= 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")


@dataclass
class Chain:
    """Stored post-burn-in draws and run diagnostics.

    Attributes
    ----------
    draws : dict of name -> ndarray of shape (n_draws, dim)
    acceptance : dict of block name -> post-burn-in acceptance rate
    scales : dict of block name -> final (frozen) proposal scale
    """

    family: str
    draws: dict
    acceptance: dict
    scales: dict
    seed: int
    wall_time: float
    config: ChainConfig
    ess: dict = field(default_factory=dict)
    beta_names: list | None = None

    @property
    def n_draws(self) -> int:
        return self.draws["beta"].shape[0]

    def summary(self, name: str, level: float = 0.95):
        d = self.draws[name]
        lo, hi = np.quantile(d, [(1 - level) / 2, (1 + level) / 2], axis=0)
        return d.mean(axis=0), lo, hi

    def es_per_sec(self) -> dict:
        return {k: v / self.wall_time for k, v in self.ess.items()}

    def to_csv(self, directory) -> list:
        """One CSV per parameter block with an ``iteration`` column."""
        os.makedirs(directory, exist_ok=True)
        it = self.config.burn_in + self.config.thin * (1 + np.arange(self.n_draws))
        paths = []
        for name, d in self.draws.items():
            path = os.path.join(directory, f"chain_{name}.csv")
            cols = [f"{name}_{j + 1}" for j in range(d.shape[1])]
            if name == "beta" and self.beta_names:
                cols = self.beta_names
            header = "iteration," + ",".join(cols)
            np.savetxt(path, np.column_stack([it, d]), delimiter=",", header=header,
                       comments="", fmt=["%d"] + ["%.17g"] * d.shape[1])
            paths.append(path)
        return paths

    def manifest(self) -> dict:
        return {"family": self.family, "seed": self.seed,
                "config": self.config.__dict__.copy(),
                "acceptance": self.acceptance, "scales": self.scales,
                "ess": self.ess, "wall_time": self.wall_time,
                "beta_names": self.beta_names or beta_names(self.draws["beta"].shape[1]),
                "n_draws": self.n_draws}

    def save_manifest(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)


def chain_from_csv(directory, family: str) -> dict:
    """Re-read the per-block CSVs written by :meth:`Chain.to_csv`."""
    out = {}
    for fname in sorted(os.listdir(directory)):
        if fname.startswith("chain_") and fname.endswith(".csv"):
            arr = np.loadtxt(os.path.join(directory, fname), delimiter=",", skiprows=1, ndmin=2)
            out[fname[6:-4]] = arr[:, 1:]
    return out


def _rm_update(log_s, prob, target, t):
    return log_s + (prob - target) / (t + 1.0) ** ADAPT_EXPONENT


def run_chain(spec: ModelSpec, z, config: ChainConfig | None = None, *, init: ChainState | None = None,
              V_beta=None, delta_scale: float | None = None, alpha_scale: float = 0.1,
              store_delta: bool = True) -> Chain:
    """Run one adaptive chain.

    Proposal scales adapt by Robbins-Monro during burn-in and are frozen
    afterwards.

    Parameters
    ----------
    spec : ModelSpec
    z : ndarray
        Responses (ordinal coded ``1..J``).
    config : ChainConfig
    init : ChainState, optional
        Starting values; zeros with ``tau = 1`` otherwise.
    V_beta : ndarray, optional
        Shape of the fixed-effect proposal; the identity scaled by 0.01 if
        omitted.
    delta_scale : float, optional
        Initial random-walk step for the basis coefficients.

    Raises
    ------
    NonFiniteLikelihoodError
        With the iteration at which it occurred.
    """
    config = config or ChainConfig()
    z = np.asarray(z, dtype=float)
    if z.shape != (spec.n,):
        raise ValueError(f"expected {spec.n} responses, got {z.shape}")
    if spec.family == "ordinal":
        z = z.astype(int)
        if z.min() < 1 or z.max() > spec.J:
            raise ValueError(f"ordinal responses must lie in 1..{spec.J}")
    rng = np.random.default_rng(config.seed)
    state = (init or initial_state(spec)).copy()
    if spec.family == "svc" and state.delta_b is None:
        state.delta_b, state.tau_b = np.zeros(spec.p), 1.0
    if spec.family == "ordinal" and state.alpha is None:
        state.alpha = np.zeros(spec.J - 2)
    k, p = spec.k, spec.p
    L_V = proposal_factor(0.01 * np.eye(k) if V_beta is None else V_beta)
    log_s = {"beta": np.log(2.38 / np.sqrt(k)),
             "delta": np.log(delta_scale if delta_scale else 0.1)}
    if spec.family == "svc":
        log_s["delta_b"] = log_s["delta"]
    n_alpha = spec.n_alpha
    log_s_alpha = np.full(n_alpha, np.log(alpha_scale))

    n_keep = (config.iterations - config.burn_in) // config.thin
    store = {"beta": np.empty((n_keep, k)), "tau": np.empty((n_keep, 1)),
             "loglik": np.empty((n_keep, 1))}
    if store_delta:
        store["delta"] = np.empty((n_keep, p))
    if spec.family == "svc":
        store["tau_b"] = np.empty((n_keep, 1))
        if store_delta:
            store["delta_b"] = np.empty((n_keep, p))
    if n_alpha:
        store["alpha"] = np.empty((n_keep, n_alpha))
    acc_count = {b: 0 for b in log_s}
    acc_alpha = np.zeros(n_alpha)

    try:
        cache = _Cache(state, spec, z)
    except NonFiniteLikelihoodError as e:
        raise NonFiniteLikelihoodError(e.index, 0) from None
    K = spec.kernel
    t0 = time.perf_counter()
    it = 0
    try:
        for it in range(config.iterations):
            adapting = config.adapt and it < config.burn_in
            post = it >= config.burn_in
            state, a, pr = mh_beta(state, L_V, spec, z, rng, np.exp(log_s["beta"]), cache)
            if adapting:
                log_s["beta"] = _rm_update(log_s["beta"], pr, TARGET_BLOCK, it)
            acc_count["beta"] += a and post
            blocks = (("delta", "w"), ("delta_b", "b")) if spec.family == "svc" else (("delta", "w"),)
            for name, which in blocks:
                state, a, pr = mh_delta(state, np.exp(log_s[name]), spec, z, rng, cache, which)
                if adapting:
                    log_s[name] = _rm_update(log_s[name], pr, TARGET_BLOCK, it)
                acc_count[name] += a and post
            state.tau = gibbs_tau(state.delta, K, spec.a_tau, spec.b_tau, rng)
            if spec.family == "svc":
                state.tau_b = gibbs_tau(state.delta_b, K, spec.a_tau2, spec.b_tau2, rng)
            if n_alpha:
                state, acc, prs = mh_alpha(state, np.exp(log_s_alpha), spec, z, rng, cache)
                if adapting:
                    log_s_alpha = _rm_update(log_s_alpha, prs, TARGET_SCALAR, it)
                if post:
                    acc_alpha += acc
            if post and (it - config.burn_in + 1) % config.thin == 0:
                i = (it - config.burn_in + 1) // config.thin - 1
                store["beta"][i] = state.beta
                store["tau"][i] = state.tau
                store["loglik"][i] = cache.ll
                if store_delta:
                    store["delta"][i] = state.delta
                if spec.family == "svc":
                    store["tau_b"][i] = state.tau_b
                    if store_delta:
                        store["delta_b"][i] = state.delta_b
                if n_alpha:
                    store["alpha"][i] = state.alpha
    except NonFiniteLikelihoodError as e:
        raise NonFiniteLikelihoodError(e.index, it) from None
    wall = time.perf_counter() - t0
    n_post = config.iterations - config.burn_in
    acceptance = {b: c / n_post for b, c in acc_count.items()}
    scales = {b: float(np.exp(v)) for b, v in log_s.items()}
    if n_alpha:
        for j in range(n_alpha):
            acceptance[f"alpha_{j + 2}"] = float(acc_alpha[j] / n_post)
            scales[f"alpha_{j + 2}"] = float(np.exp(log_s_alpha[j]))
    chain = Chain(spec.family, store, acceptance, scales, config.seed, wall, config,
                  beta_names=spec.beta_names)
    if n_keep >= 4:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            for j, key in enumerate(spec.beta_names):
                chain.ess[key] = ess(store["beta"][:, j])
            for name in ("tau", "tau_b", "alpha"):
                if name in store:
                    for j in range(store[name].shape[1]):
                        off = 2 if name == "alpha" else 1
                        chain.ess[f"{name}_{j + off}"] = ess(store[name][:, j])
    return chain


def run_chains(spec, z, configs, n_jobs: int = 1, **kwargs) -> list:
    """Independent chains (one per config) run in parallel."""
    if n_jobs == 1:
        return [run_chain(spec, z, c, **kwargs) for c in configs]
    from joblib import Parallel, delayed
    return Parallel(n_jobs=n_jobs)(delayed(run_chain)(spec, z, c, **kwargs) for c in configs)
