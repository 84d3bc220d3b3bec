"""Estimator-style front end over the MCMC engine.

ZicompRegression follows the fit/predict convention: `fit` consumes a
long-format design (one row per observed location-period cell), runs
the chain, and exposes posterior summaries; `predict` returns
posterior-predictive mean counts; `residuals` returns randomized
quantile residuals for the fitted cells.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .diagnostics import (
    inclusion_probabilities,
    point_state_from_samples,
    posterior_predictive_mean,
    rqr,
    summary_table,
)
from .model import MISSING, Dataset, compute_predictors, month_dummies
from .sampler import ChainConfig, PriorConfig, run_chain
from .spatial import AdjacencyGraph, basis_for_graph

__all__ = ["ZicompRegression"]


def _validate_cells(location, period, n, name):
    location = np.asarray(location, dtype=np.int64).reshape(-1)
    period = np.asarray(period, dtype=np.int64).reshape(-1)
    if location.shape != period.shape:
        raise ValueError("location and period must have equal length")
    if location.min(initial=0) < 0 or period.min(initial=0) < 0:
        raise ValueError(f"{name}: location/period indices must be nonnegative")
    if location.max(initial=-1) >= n:
        raise ValueError(f"{name}: location index exceeds graph size {n}")
    return location, period


class ZicompRegression(BaseEstimator):
    """Zero-inflated COMP regression with spatial basis selection.

    Parameters mirror the sampler configuration; `graph` is the
    adjacency structure the locations live on. Covariates passed to
    `fit` must not include an intercept (one is added).
    """

    def __init__(
        self,
        graph: AdjacencyGraph = None,
        q: int = 20,
        rho: float = 0.99,
        n_iterations: int = 4000,
        burn_in: int = None,
        thin: int = 1,
        seed: int = 0,
        zip_mode: bool = False,
        method: str = None,
        indicator_period: int = 10,
        reference_month: int = 0,
        priors: PriorConfig = None,
        normalizer_tol: float = 1e-10,
        cache_dir=None,
    ):
        self.graph = graph
        self.q = q
        self.rho = rho
        self.n_iterations = n_iterations
        self.burn_in = burn_in
        self.thin = thin
        self.seed = seed
        self.zip_mode = zip_mode
        self.method = method
        self.indicator_period = indicator_period
        self.reference_month = reference_month
        self.priors = priors
        self.normalizer_tol = normalizer_tol
        self.cache_dir = cache_dir

    def _chain_config(self) -> ChainConfig:
        method = self.method
        if method is None:
            method = "tractable" if self.zip_mode else "exchange"
        return ChainConfig(
            n_iterations=self.n_iterations,
            burn_in=self.burn_in,
            thin=self.thin,
            seed=self.seed,
            method=method,
            zip_constrained=self.zip_mode,
            indicator_period=self.indicator_period,
            rho=self.rho,
            q=self.q,
            normalizer_tol=self.normalizer_tol,
        )

    def _assemble(self, X, y, location, period, T=None):
        n = self.graph.n
        location, period = _validate_cells(location, period, n, "fit")
        X = check_array(X, ensure_2d=True, dtype=float)
        if X.shape[0] != location.shape[0]:
            raise ValueError("X rows must align with location/period")
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if y.shape[0] != location.shape[0]:
            raise ValueError("y must align with location/period")
        if (y < 0).any():
            raise ValueError("y must contain nonnegative counts")
        T = int(period.max()) + 1 if T is None else T
        y_tab = np.full((n, T), MISSING, dtype=np.int64)
        x_tab = np.zeros((n, T, 1 + X.shape[1]))
        x_tab[:, :, 0] = 1.0
        if len({(int(s), int(t)) for s, t in zip(location, period)}) != location.size:
            raise ValueError("duplicate (location, period) cells")
        y_tab[location, period] = y
        x_tab[location, period, 1:] = X
        return Dataset(
            y=y_tab,
            X=x_tab,
            M=month_dummies(T, self.reference_month),
            graph=self.graph,
        )

    def fit(self, X, y, *, location, period):
        """Run the sampler on long-format data.

        X: (N, k) covariates without intercept; y: (N,) counts;
        location/period: (N,) cell indices on the graph/time axis.
        """
        if self.graph is None:
            raise ValueError("graph must be set before fitting")
        data = self._assemble(X, y, location, period)
        cfg = self._chain_config()
        basis = basis_for_graph(self.graph, self.q, self.rho, cache_dir=self.cache_dir)
        out = run_chain(data, basis, cfg, prior=self.priors)
        self.data_ = data
        self.basis_ = basis
        self.chain_ = out
        self.samples_ = out.samples
        self.summary_ = summary_table(out.samples)
        if out.n_kept:
            inc_g, _ = inclusion_probabilities(out.samples["ind_gamma"])
            inc_d, _ = inclusion_probabilities(out.samples["ind_delta"])
            self.inclusion_gamma_ = inc_g
            self.inclusion_delta_ = inc_d
        self.n_features_in_ = X.shape[1] if hasattr(X, "shape") else len(X[0])
        return self

    def predict(self, X=None, *, location=None, period=None, draws: int = 1000, seed: int = 0):
        """Posterior-predictive mean counts.

        With no arguments, predicts the fitted cells (aligned n x T
        table flattened to the observed cells in row-major order is
        avoided: returns per-(location, period) values for the fitted
        cells). Passing new X/location/period predicts those cells.
        """
        check_is_fitted(self, "chain_")
        rng = np.random.default_rng(seed)
        if X is None:
            data = self.data_
            mean, _ = posterior_predictive_mean(
                self.samples_, data, self.basis_, draws, rng
            )
            rows, cols = np.nonzero(data.observed)
            return mean[rows, cols]
        location, period = _validate_cells(
            location, period, self.graph.n, "predict"
        )
        X = check_array(X, ensure_2d=True, dtype=float)
        T = max(int(period.max()) + 1, self.data_.T)
        y_dummy = np.full((self.graph.n, T), MISSING, dtype=np.int64)
        y_dummy[location, period] = 0
        x_tab = np.zeros((self.graph.n, T, 1 + X.shape[1]))
        x_tab[:, :, 0] = 1.0
        x_tab[location, period, 1:] = X
        data = Dataset(
            y=y_dummy,
            X=x_tab,
            M=month_dummies(T, self.reference_month),
            graph=self.graph,
        )
        mean, _ = posterior_predictive_mean(self.samples_, data, self.basis_, draws, rng)
        return mean[location, period]

    def residuals(self, seed: int = 0):
        """Randomized quantile residuals at the posterior-median point fit."""
        check_is_fitted(self, "chain_")
        state = point_state_from_samples(self.samples_, self.data_, self.basis_.q)
        pred = compute_predictors(state, self.data_, self.basis_)
        rng = np.random.default_rng(seed)
        out = rqr(self.data_, pred, rng, tol=self.normalizer_tol, seed=seed)
        rows, cols = np.nonzero(self.data_.observed)
        return out.residuals[rows, cols]

    def score(self, X=None, y=None, **kw):
        """Negative mean squared error of the predictive mean on fitted cells."""
        check_is_fitted(self, "chain_")
        pred = self.predict()
        rows, cols = np.nonzero(self.data_.observed)
        actual = self.data_.y[rows, cols]
        return -float(np.mean((pred - actual) ** 2))
