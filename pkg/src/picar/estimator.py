"""Scikit-learn style estimators wrapping the basis construction and sampler."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import basis as bmod
from ._validation import (check_family, check_fraction, check_locations, check_response,
                          split_columns)
from .evaluate import predict as predict_draws
from .glm import select_rank
from .mcmc import ChainConfig, ModelSpec, initial_state, run_chain
from .mesh import adjacency, build_mesh, projector
from .pipeline import MESH_RATIO, _glm_at_rank, _init_from_glm, _proposal_settings, design


class MoranBasisTransformer(TransformerMixin, BaseEstimator):
    """Map 2-D locations onto the leading Moran's eigenvectors of a mesh.

    ``fit`` builds a mesh around the given locations and its basis;
    ``transform`` returns ``A(S) M``, the basis interpolated to ``S``.

    Parameters
    ----------
    n_components : int
        Number of eigenvectors requested (fewer are kept if some
        eigenvalues are not positive).
    mesh_nodes : int, optional
        Target mesh size; ``round(1.649 n)`` by default.
    buffer_fraction : float
    random_state : int
    """

    def __init__(self, n_components=200, mesh_nodes=None, buffer_fraction=0.1, random_state=0):
        self.n_components = n_components
        self.mesh_nodes = mesh_nodes
        self.buffer_fraction = buffer_fraction
        self.random_state = random_state

    def fit(self, S, y=None):
        S = check_locations(S)
        m = self.mesh_nodes or int(round(MESH_RATIO * S.shape[0]))
        self.mesh_ = build_mesh(S, m, self.buffer_fraction, seed=self.random_state)
        self.adjacency_ = adjacency(self.mesh_)
        P = min(int(self.n_components), self.mesh_.n_vertices - 2)
        self.basis_ = bmod.moran_basis(self.adjacency_, P, seed=self.random_state)
        self.eigenvalues_ = self.basis_.values
        self.n_features_in_ = 2
        return self

    def transform(self, S):
        check_is_fitted(self, "basis_")
        S = check_locations(S)
        return np.asarray(projector(self.mesh_, S) @ self.basis_.vectors)

    def projector(self, S):
        check_is_fitted(self, "basis_")
        return projector(self.mesh_, check_locations(S))


class PICAR(BaseEstimator):
    """Bayesian spatial GLMM with a low-rank Moran's-eigenvector random effect.

    ``X`` carries the two coordinates (``spatial_columns``) and the
    covariates.  ``fit`` holds out ``validation_fraction`` of the rows to
    choose the rank, then samples the posterior on the remaining rows.

    Parameters
    ----------
    family : {"binary", "count", "poisson", "ordinal", "svc"}
    spatial_columns : pair of int
    rank : int, optional
        Fixed rank; the held-out heuristic chooses it otherwise.
    precision : {"ind", "icar", "car"}
    n_iter, burn_in, thin : int
        Sampler settings.
    fit_intercept : bool
        Add a constant to the fixed effects (ignored for ordinal, where the
        first cutoff is pinned at 0).

    Attributes
    ----------
    rank_ : int
    coef_ : ndarray
        Posterior mean of the covariate coefficients.
    coef_interval_ : ndarray of shape (k, 2)
        95% equal-tailed intervals.
    intercept_ : float
        Posterior mean intercept (0 when none is fitted).
    chain_ : Chain
    """

    def __init__(self, family="binary", spatial_columns=(0, 1), rank=None, rank_max=200,
                 rank_grid=None, precision="icar", car_rho=0.5, mesh_nodes=None,
                 buffer_fraction=0.1, n_iter=20000, burn_in=5000, thin=5,
                 validation_fraction=0.2, threshold=0.5, fit_intercept=True, random_state=0,
                 n_jobs=1):
        self.family = family
        self.spatial_columns = spatial_columns
        self.rank = rank
        self.rank_max = rank_max
        self.rank_grid = rank_grid
        self.precision = precision
        self.car_rho = car_rho
        self.mesh_nodes = mesh_nodes
        self.buffer_fraction = buffer_fraction
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.thin = thin
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.fit_intercept = fit_intercept
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y):
        fam = check_family(self.family)
        S, C = split_columns(X, self.spatial_columns)
        y = check_response(y, fam)
        if y.size != S.shape[0]:
            raise ValueError(f"X has {S.shape[0]} rows but y has {y.size}")
        self.n_features_in_ = np.asarray(X).shape[1]
        self.family_ = fam
        self.J_ = int(y.max()) if fam == "ordinal" else None
        self._icpt = bool(self.fit_intercept) and fam != "ordinal"
        C = design(fam, C, self._icpt)
        self.basis_transformer_ = MoranBasisTransformer(
            self.rank_max, self.mesh_nodes, self.buffer_fraction, self.random_state).fit(S)
        AM = self.basis_transformer_.transform(S)
        N = self.basis_transformer_.adjacency_
        M = self.basis_transformer_.basis_.vectors

        if self.rank is None:
            frac = check_fraction(self.validation_fraction, "validation_fraction")
            rng = np.random.default_rng(self.random_state)
            idx = rng.permutation(y.size)
            n_cv = max(1, int(round(frac * y.size)))
            cv, tr = np.sort(idx[:n_cv]), np.sort(idx[n_cv:])
            sel = select_rank(C[tr], y[tr], AM[tr], C[cv], y[cv], AM[cv], family=fam,
                              grid=self.rank_grid, J=self.J_, n_jobs=self.n_jobs)
            self.rank_selection_ = sel
            self.rank_ = sel.chosen
            gfit, rows = sel.fit, tr
        else:
            self.rank_ = int(self.rank)
            if not 1 <= self.rank_ <= AM.shape[1]:
                raise ValueError(f"rank {self.rank_} outside [1, {AM.shape[1]}]")
            rows = np.arange(y.size)
            gfit = _glm_at_rank(fam, C, y, AM, self.rank_, self.J_)
        p = self.rank_
        kernel = bmod.precision_kernel(self.precision, N, M[:, :p], self.car_rho)
        spec = ModelSpec(fam, C[rows], AM[rows, :p], kernel, J=self.J_, intercept=self._icpt)
        init = initial_state(spec, **_init_from_glm(fam, gfit, C.shape[1], p))
        V, ds_ = _proposal_settings(fam, gfit, C.shape[1], p)
        self.chain_ = run_chain(spec, y[rows],
                                ChainConfig(self.n_iter, self.burn_in, self.thin, self.random_state),
                                init=init, V_beta=V, delta_scale=ds_)
        b = self.chain_.draws["beta"]
        kc = b.shape[1] - int(self._icpt)
        self.coef_ = b[:, :kc].mean(axis=0)
        self.coef_interval_ = np.quantile(b[:, :kc], [0.025, 0.975], axis=0).T
        self.intercept_ = float(b[:, -1].mean()) if self._icpt else 0.0
        if fam == "ordinal":
            self.cutoffs_ = np.concatenate([[0.0], np.cumsum(np.exp(
                self.chain_.draws["alpha"].mean(axis=0)))])
        return self

    def _summary(self, X):
        check_is_fitted(self, "chain_")
        S, C = split_columns(X, self.spatial_columns)
        if C.shape[1] != self.coef_.size:
            raise ValueError(f"expected {self.coef_.size} covariates, got {C.shape[1]}")
        C = design(self.family_, C, self._icpt)
        AM = self.basis_transformer_.transform(S)[:, :self.rank_]
        return predict_draws(self.chain_, self.family_, AM, C, J=self.J_, threshold=self.threshold)

    def predict(self, X):
        """Class label (binary), rate (count/svc) or modal category (ordinal)."""
        s = self._summary(X)
        if self.family_ == "binary":
            return s.classification.astype(int)
        if self.family_ == "ordinal":
            return s.z_hat.astype(int)
        return s.mean

    def predict_proba(self, X):
        """Posterior mean class probabilities (binary and ordinal)."""
        s = self._summary(X)
        if self.family_ == "binary":
            return np.column_stack([1.0 - s.mean, s.mean])
        if self.family_ == "ordinal":
            return s.category_probs
        raise AttributeError("predict_proba is only defined for binary and ordinal families")

    def predict_summary(self, X):
        return self._summary(X)
