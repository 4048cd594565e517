"""Posterior prediction at held-out sites and the study metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .numerics import clamp_exp

CHUNK = 1000


@dataclass
class PredictionSummary:
    """Posterior predictive summaries at validation sites.

    Attributes
    ----------
    mean : ndarray
        Posterior mean of the family mean (probability, rate, or for
        ordinal responses the per-draw predicted category).
    sd : ndarray
        Posterior standard deviation of the same quantity.
    z_hat : ndarray
        Point prediction: mean probability, mean rate, or modal category.
    classification : ndarray or None
        Binary only: ``mean >= threshold``.
    category_probs : ndarray or None
        Ordinal only: posterior mean category probabilities, shape (n_cv, J).
    params : dict
        ``name -> (mean, lower, upper)`` with 95% equal-tailed intervals.
    """

    mean: np.ndarray
    sd: np.ndarray
    z_hat: np.ndarray
    classification: np.ndarray | None = None
    category_probs: np.ndarray | None = None
    params: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)


def _draws_of(chain):
    return chain.draws if hasattr(chain, "draws") else chain


def parameter_summary(draws: dict, level: float = 0.95, beta_names=None) -> tuple[dict, list]:
    """Posterior mean and equal-tailed interval per scalar parameter.

    ``beta_names`` labels the fixed-effect columns (``beta_1..`` by
    default); an intercept named ``beta_0`` is listed first.
    """
    out, flags = {}, []
    q = [(1 - level) / 2, (1 + level) / 2]
    for name in ("beta", "alpha", "tau", "tau_b"):
        if name not in draws:
            continue
        d = np.asarray(draws[name], dtype=float)
        keys = [f"{name}_{j + (2 if name == 'alpha' else 1)}" for j in range(d.shape[1])]
        if name == "beta" and beta_names is not None:
            if len(beta_names) != d.shape[1]:
                raise ValueError(f"{len(beta_names)} names for {d.shape[1]} coefficients")
            keys = list(beta_names)
        order = sorted(range(d.shape[1]), key=lambda j: keys[j] != "beta_0")
        for j in order:
            m = float(d[:, j].mean())
            lo, hi = (float(v) for v in np.quantile(d[:, j], q))
            key = keys[j]
            out[key] = (m, lo, hi)
            if not lo <= m <= hi:
                flags.append(f"{key}: mean {m:.4g} outside its interval")
    return out, flags


def predict(chain, family: str, AM_cv, X_cv, *, J: int | None = None,
            threshold: float = 0.5, beta_names=None) -> PredictionSummary:
    """Per-draw family means at validation sites, then summarised.

    Parameters
    ----------
    chain : Chain or dict
        Stored draws: ``beta``, ``delta`` and, as applicable, ``delta_b``
        and ``alpha``.
    family : {"binary", "count", "svc", "ordinal"}
    AM_cv : ndarray of shape (n_cv, p)
    X_cv : ndarray of shape (n_cv, k)
        Same columns as the fitted design, intercept included.  For svc the
        first column carries the varying coefficient.
    beta_names : list of str, optional
        Taken from ``chain`` when it is a :class:`~picar.mcmc.Chain`.
    """
    draws = _draws_of(chain)
    if beta_names is None:
        beta_names = getattr(chain, "beta_names", None)
    AM_cv = np.asarray(AM_cv, dtype=float)
    X_cv = np.asarray(X_cv, dtype=float)
    if "delta" not in draws:
        raise ValueError("chain does not store basis coefficients")
    B, D = np.asarray(draws["beta"]), np.asarray(draws["delta"])
    if AM_cv.shape[1] != D.shape[1]:
        raise ValueError(f"cv basis has {AM_cv.shape[1]} columns; chain has p={D.shape[1]}")
    if X_cv.shape[1] != B.shape[1]:
        raise ValueError(f"X_cv has {X_cv.shape[1]} columns; chain has k={B.shape[1]}")
    if X_cv.shape[0] != AM_cv.shape[0]:
        raise ValueError("X_cv and AM_cv row counts differ")
    Db = np.asarray(draws["delta_b"]) if family == "svc" else None
    if family == "ordinal":
        A = np.asarray(draws["alpha"]).reshape(B.shape[0], -1)
        J = A.shape[1] + 2 if J is None else J
    n_draws, n_cv = B.shape[0], X_cv.shape[0]
    s1 = np.zeros(n_cv)
    s2 = np.zeros(n_cv)
    counts = np.zeros((n_cv, J), dtype=np.int64) if family == "ordinal" else None
    psum = np.zeros((n_cv, J)) if family == "ordinal" else None
    for start in range(0, n_draws, CHUNK):
        sl = slice(start, min(start + CHUNK, n_draws))
        eta = B[sl] @ X_cv.T + D[sl] @ AM_cv.T
        if family == "svc":
            eta += (Db[sl] @ AM_cv.T) * X_cv[:, 0][None, :]
        if family == "binary":
            mu = expit(eta)
        elif family in ("count", "svc"):
            mu = clamp_exp(eta)
        elif family == "ordinal":
            cum = np.cumsum(np.exp(A[sl]), axis=1)
            theta = np.hstack([np.zeros((cum.shape[0], 1)), cum])
            g = expit(theta[:, None, :] - eta[:, :, None])
            g = np.concatenate([np.zeros(g.shape[:2] + (1,)), g, np.ones(g.shape[:2] + (1,))],
                               axis=2)
            P = np.diff(g, axis=2)
            psum += P.sum(axis=0)
            cat = 1 + np.argmax(P, axis=2)
            for c in range(1, J + 1):
                counts[:, c - 1] += (cat == c).sum(axis=0)
            mu = cat.astype(float)
        else:
            raise ValueError(f"unknown family {family!r}")
        s1 += mu.sum(axis=0)
        s2 += (mu * mu).sum(axis=0)
    mean = s1 / n_draws
    sd = np.sqrt(np.maximum(s2 / n_draws - mean * mean, 0.0))
    params, flags = parameter_summary(draws, beta_names=beta_names)
    if family == "ordinal":
        z_hat = 1.0 + np.argmax(counts, axis=1)
        return PredictionSummary(mean, sd, z_hat, None, psum / n_draws, params, flags)
    cls = (mean >= threshold).astype(float) if family == "binary" else None
    return PredictionSummary(mean, sd, mean.copy(), cls, None, params, flags)


def _pair(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0:
        raise ValueError("empty input")
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def cvmspe(z_cv, z_hat) -> float:
    """Mean squared prediction error over the validation sites."""
    a, b = _pair(z_cv, z_hat)
    return float(np.mean((a - b) ** 2))


def mpr(z_cv, z_hat) -> float:
    """Proportion of incorrectly predicted categories."""
    a, b = _pair(z_cv, z_hat)
    return float(np.mean(a != b))


def misclassification(z_cv, prob, threshold: float = 0.5) -> float:
    a, b = _pair(z_cv, prob)
    return mpr(a, (b >= threshold).astype(float))


def score(family: str, z_cv, summary: PredictionSummary) -> float:
    """CVMSPE for binary/count/svc, misprediction rate for ordinal."""
    if family == "ordinal":
        return mpr(z_cv, summary.z_hat)
    return cvmspe(z_cv, summary.z_hat)


# ---------------------------------------------------------------------------
# Coverage
# ---------------------------------------------------------------------------


@dataclass
class CoverageTable:
    """Fraction of replicates whose 95% interval covers the truth.

    ``coverage[precision][param]`` with ``n_ok`` successful replicates and
    ``failures`` a list of ``(replicate, message)``.
    """

    coverage: dict
    n_ok: dict
    failures: list
    intervals: dict = field(default_factory=dict)

    def rows(self):
        for prec, cov in self.coverage.items():
            for name, v in cov.items():
                yield prec, name, v, self.n_ok[prec]


def coverage_from_intervals(intervals, truth) -> float:
    """Share of ``(lower, upper)`` pairs containing ``truth``."""
    iv = np.asarray(intervals, dtype=float).reshape(-1, 2)
    if iv.shape[0] == 0:
        return float("nan")
    return float(np.mean((iv[:, 0] <= truth) & (truth <= iv[:, 1])))


def coverage_study(study_config: dict, replicates: int = 100, *, n_jobs: int = 1,
                   min_replicates: int = 10, runner=None) -> CoverageTable:
    """Repeat generate-and-fit and tabulate interval coverage.

    Parameters
    ----------
    study_config : dict
        Keys understood by :func:`picar.pipeline.coverage_replicate`; the key
        ``precisions`` lists the kernels to compare.
    replicates : int
        At least ``min_replicates``.
    runner : callable, optional
        ``runner(config, replicate) -> {precision: {param: (mean, lo, hi)}}``.
        Defaults to the full pipeline; replaceable for testing.

    Failed replicates are recorded, excluded and reported.
    """
    if replicates < min_replicates:
        raise ValueError(f"need at least {min_replicates} replicates, got {replicates}")
    if runner is None:
        from .pipeline import coverage_replicate as runner
    truth = _truth_values(study_config)

    def safe(rep):
        try:
            return rep, runner(study_config, rep), None
        except Exception as exc:  # noqa: BLE001 - every failure is reported
            return rep, None, f"{type(exc).__name__}: {exc}"

    if n_jobs == 1:
        results = [safe(r) for r in range(replicates)]
    else:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=n_jobs)(delayed(safe)(r) for r in range(replicates))
    failures = [(r, msg) for r, res, msg in results if res is None]
    intervals: dict = {}
    for _, res, _ in results:
        if res is None:
            continue
        for prec, params in res.items():
            for name, (_, lo, hi) in params.items():
                if name in truth:
                    intervals.setdefault(prec, {}).setdefault(name, []).append((lo, hi))
    coverage = {prec: {name: coverage_from_intervals(iv, truth[name]) for name, iv in d.items()}
                for prec, d in intervals.items()}
    n_ok = {prec: len(next(iter(d.values()))) if d else 0 for prec, d in intervals.items()}
    if failures:
        warnings.warn(f"{len(failures)} of {replicates} replicates failed", RuntimeWarning)
    return CoverageTable(coverage, n_ok, failures, intervals)


def _truth_values(cfg) -> dict:
    truth = {}
    for j, b in enumerate(cfg.get("beta", (1.0, 1.0))):
        truth[f"beta_{j + 1}"] = float(b)
    if cfg.get("family") == "ordinal":
        theta = cfg.get("theta", (0.0, 1.0, 2.0))
        for j, a in enumerate(np.log(np.diff(theta))):
            truth[f"alpha_{j + 2}"] = float(a)
    return truth

