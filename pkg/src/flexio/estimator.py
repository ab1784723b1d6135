"""Scikit-learn style wrapper around fitting and forecasting.

Inputs are day-major arrays: ``X`` of shape (S, T, F) holds features, ``y``
of shape (S, T) the observed net demand.  Generation, tariffs and bounds are
passed as keyword arguments because they are not features of the rule.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import default_bounds
from .fit import FitConfig, FitResult, fit as _fit
from .forecast import Forecast, point_forecast, quantile_forecast, training_residuals
from .metrics import DEFAULT_LEVELS
from .model import ComfortCosts, DaySample, FlexBounds, Hyperparams, PriceSignal

__all__ = ["FlexibleDemandIO", "check_day_arrays"]


def check_day_arrays(X, y=None, gen=None):
    """Validate day-major inputs and return float arrays.

    Returns
    -------
    X : ndarray of shape (S, T, F)
    y : ndarray of shape (S, T) or None
    gen : ndarray of shape (S, T)
        Zeros when not given.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[..., None]
    if X.ndim != 3:
        raise ValueError(f"X must have shape (S, T, F), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    S, T = X.shape[:2]
    if y is not None:
        y = np.asarray(y, dtype=float)
        if y.shape != (S, T):
            raise ValueError(f"y must have shape {(S, T)}, got {y.shape}")
        if not np.all(np.isfinite(y)):
            raise ValueError("y contains non-finite values")
    gen = np.zeros((S, T)) if gen is None else np.asarray(gen, dtype=float)
    if gen.shape != (S, T):
        raise ValueError(f"gen must have shape {(S, T)}, got {gen.shape}")
    return X, y, gen


def _per_day(value, S: int, name: str) -> list:
    if value is None:
        raise ValueError(f"{name} is required")
    if isinstance(value, (PriceSignal, ComfortCosts, FlexBounds)):
        return [value] * S
    value = list(value)
    if len(value) != S:
        raise ValueError(f"{name} has {len(value)} entries for {S} days")
    return value


class FlexibleDemandIO(RegressorMixin, BaseEstimator):
    """Inverse-optimisation model of price-responsive household demand.

    Parameters
    ----------
    t_max : int
        Maximum number of shifting hours per day.
    alpha : float
        Forgetting exponent; 0 weighs all training days equally.
    gamma_sf_plus, gamma_sf_minus, gamma_sd : float
        Kernel bandwidths of the three envelope rules.
    solver_mode : {"alternating", "exact"}
    max_iters, tol_obj, max_nodes, day_max_nodes
        Solver limits, see :class:`flexio.fit.FitConfig`.
    feature_scaling : {"standardize", "minmax", "none"}

    Attributes
    ----------
    result_ : FitResult
    residuals_ : ndarray of shape (S, T)
        In-sample residuals used for quantile forecasts.
    """

    def __init__(self, t_max: int = 8, alpha: float = 0.0, gamma_sf_plus: float = 1.0,
                 gamma_sf_minus: float = 1.0, gamma_sd: float = 1.0, solver_mode: str = "alternating",
                 max_iters: int = 50, tol_obj: float = 1e-8, max_nodes: int = 20_000,
                 day_max_nodes: int = 100, feature_scaling: str = "standardize"):
        self.t_max = t_max
        self.alpha = alpha
        self.gamma_sf_plus = gamma_sf_plus
        self.gamma_sf_minus = gamma_sf_minus
        self.gamma_sd = gamma_sd
        self.solver_mode = solver_mode
        self.max_iters = max_iters
        self.tol_obj = tol_obj
        self.max_nodes = max_nodes
        self.day_max_nodes = day_max_nodes
        self.feature_scaling = feature_scaling

    def _config(self) -> FitConfig:
        hyper = Hyperparams(int(self.t_max), float(self.alpha), self.gamma_sf_plus, self.gamma_sf_minus, self.gamma_sd)
        return FitConfig(hyper=hyper, solver_mode=self.solver_mode, max_iters=self.max_iters,
                         tol_obj=self.tol_obj, max_nodes=self.max_nodes, day_max_nodes=self.day_max_nodes,
                         feature_scaling=self.feature_scaling)

    def fit(self, X, y, *, gen=None, prices=None, costs=None, bounds: Optional[Sequence[FlexBounds]] = None):
        """Fit on S training days; ``prices`` and ``costs`` may be shared or per day."""
        X, y, gen = check_day_arrays(X, y, gen)
        S = X.shape[0]
        days = [DaySample(y[s], gen[s], X[s], s) for s in range(S)]
        bounds = default_bounds(days) if bounds is None else _per_day(bounds, S, "bounds")
        result = _fit(days, bounds, _per_day(prices, S, "prices"), _per_day(costs, S, "costs"), self._config())
        self.result_ = result
        self.residuals_ = training_residuals(result, days)
        self.n_features_in_ = X.shape[2]
        self.horizon_ = X.shape[1]
        return self

    def decompose(self, X, *, gen=None, prices=None, costs=None, bounds=None) -> list[Forecast]:
        """Decomposed forecasts, one per day of ``X``."""
        check_is_fitted(self, "result_")
        X, _, gen = check_day_arrays(X, None, gen)
        if X.shape[1:] != (self.horizon_, self.n_features_in_):
            raise ValueError(f"X must have shape (D, {self.horizon_}, {self.n_features_in_})")
        D = X.shape[0]
        prices, costs = _per_day(prices, D, "prices"), _per_day(costs, D, "costs")
        bounds = [None] * D if bounds is None else _per_day(bounds, D, "bounds")
        return [point_forecast(self.result_, prices[d], costs[d], gen[d], X[d], bounds[d], int(self.t_max))
                for d in range(D)]

    def predict(self, X, *, gen=None, prices=None, costs=None, bounds=None) -> np.ndarray:
        """Net demand forecasts of shape (D, T)."""
        return np.array([f.net for f in self.decompose(X, gen=gen, prices=prices, costs=costs, bounds=bounds)])

    def predict_quantiles(self, X, *, gen=None, prices=None, costs=None, bounds=None,
                          levels=DEFAULT_LEVELS) -> np.ndarray:
        """Quantile forecasts of shape (D, Q, T) from in-sample residuals."""
        point = self.predict(X, gen=gen, prices=prices, costs=costs, bounds=bounds)
        return np.array([quantile_forecast(p, self.residuals_, levels) for p in point])

    def score(self, X, y, sample_weight=None, *, gen=None, prices=None, costs=None, bounds=None) -> float:
        """Negative mean absolute error (higher is better)."""
        pred = self.predict(X, gen=gen, prices=prices, costs=costs, bounds=bounds)
        y = np.asarray(y, dtype=float)
        err = np.abs(pred - y).mean(axis=1)
        return -float(np.average(err, weights=sample_weight))
