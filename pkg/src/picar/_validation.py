"""Input checks shared by the estimator API."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

FAMILIES = ("binary", "count", "svc", "ordinal")


def check_locations(S, name="locations") -> np.ndarray:
    """Finite ``(n, 2)`` float array."""
    S = check_array(S, dtype=float, ensure_2d=True, input_name=name)
    if S.shape[1] != 2:
        raise ValueError(f"{name} must have exactly 2 columns, got {S.shape[1]}")
    return S


def check_family(family) -> str:
    aliases = {"poisson": "count"}
    fam = aliases.get(family, family)
    if fam not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES + ('poisson',)}, got {family!r}")
    return fam


def check_response(y, family) -> np.ndarray:
    y = np.asarray(y, dtype=float).ravel()
    if not np.isfinite(y).all():
        raise ValueError("responses must be finite")
    if family == "binary" and not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("binary responses must be 0/1")
    if family in ("count", "svc") and (np.any(y < 0) or np.any(y != np.round(y))):
        raise ValueError("count responses must be non-negative integers")
    if family == "ordinal" and (np.any(y < 1) or np.any(y != np.round(y))):
        raise ValueError("ordinal responses must be integers coded 1..J")
    return y


def split_columns(X, spatial_columns):
    """Split a feature matrix into locations and covariates."""
    X = check_array(X, dtype=float, ensure_2d=True)
    sc = list(spatial_columns)
    if len(sc) != 2 or len(set(sc)) != 2:
        raise ValueError("spatial_columns must name two distinct columns")
    if max(sc) >= X.shape[1] or min(sc) < -X.shape[1]:
        raise ValueError(f"spatial_columns {sc} out of range for {X.shape[1]} columns")
    sc = [c % X.shape[1] for c in sc]
    rest = [j for j in range(X.shape[1]) if j not in sc]
    if not rest:
        raise ValueError("need at least one covariate column besides the coordinates")
    return X[:, sc], X[:, rest]


def check_fraction(v, name) -> float:
    if not 0.0 < v < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {v}")
    return float(v)
