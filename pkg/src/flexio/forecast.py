"""Day-ahead decomposed forecasts from a fitted model.

The point forecast solves the consumer problem for the new day with the
fitted baseload and the envelopes the kernel rules give for that day's
features.  Quantiles add empirical per-hour residual quantiles to the point
forecast.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .fit import FitResult
from .fop import FopSolution, solve_fop
from .kernel import envelope_forecast
from .metrics import DEFAULT_LEVELS
from .model import ComfortCosts, DaySample, DemandAttributes, FlexBounds, PriceSignal, _vec

__all__ = [
    "Forecast",
    "point_forecast",
    "quantile_forecast",
    "training_residuals",
    "forecasts_to_csv",
    "MIN_RESIDUAL_DAYS",
]

MIN_RESIDUAL_DAYS = 5


@dataclass(frozen=True)
class Forecast:
    """Net demand forecast of one day split into baseload and flexible parts.

    ``quantiles`` has shape (Q, T) and is None until attached.
    """

    net: np.ndarray
    baseload_net: np.ndarray
    flexible: np.ndarray
    shift_up: np.ndarray
    shift_down: np.ndarray
    shed_kept: np.ndarray
    envelopes: np.ndarray
    solution: Optional[FopSolution] = None
    quantiles: Optional[np.ndarray] = None
    levels: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return self.net.shape[0]

    def with_quantiles(self, history_residuals, levels=DEFAULT_LEVELS) -> "Forecast":
        q = quantile_forecast(self.net, history_residuals, levels)
        return replace(self, quantiles=q, levels=np.asarray(levels, dtype=float))


def point_forecast(fit: FitResult, prices: PriceSignal, costs: ComfortCosts, gen_forecast, features_day,
                   bounds: Optional[FlexBounds] = None, t_max: Optional[int] = None) -> Forecast:
    """Forecast of day S+1.

    Parameters
    ----------
    fit : FitResult
        Fitted baseload and envelope rules.
    prices, costs : PriceSignal, ComfortCosts
        Tariff and comfort costs of the forecast day.
    gen_forecast : array of shape (T,)
        Generation of the forecast day (assumed known).
    features_day : array of shape (T, F)
        Raw features of the forecast day.
    bounds : FlexBounds, optional
        Physical caps on the envelopes.  Without caps the rule values are only
        clipped at zero.
    t_max : int
        Shift-hour budget; required.

    Returns
    -------
    Forecast
        ``net == baseload_net + flexible`` holds elementwise by construction.
    """
    if t_max is None:
        raise ValueError("t_max is required")
    T = fit.T
    gen = _vec(gen_forecast, "gen_forecast", T)
    X = np.asarray(features_day, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[0] != T:
        raise ValueError(f"features_day has {X.shape[0]} rows, expected {T}")
    env_up, env_dn, env_sd = envelope_forecast(fit.envelope_model, X, bounds)
    attrs = DemandAttributes(fit.d_bl, env_up, env_dn, env_sd)
    sol = solve_fop(prices, costs, attrs, int(t_max), gen)
    baseload_net = fit.d_bl - gen
    flexible = sol.d_sf + sol.d_sd
    net = baseload_net + flexible
    arrays = [net, baseload_net, flexible, sol.theta.d_sf_plus, sol.theta.d_sf_minus, sol.d_sd,
              np.vstack([env_up, env_dn, env_sd])]
    for arr in arrays:
        arr.setflags(write=False)
    return Forecast(*arrays, solution=sol)


def training_residuals(fit: FitResult, train: Sequence[DaySample]) -> np.ndarray:
    """Observed minus reconstructed net demand on the training days, shape (S, T)."""
    if len(train) != fit.S:
        raise ValueError("train does not match the fitted days")
    return np.array([day.demand_hat - (fit.d_bl + sol.d_sf + sol.d_sd - day.gen_hat)
                     for day, sol in zip(train, fit.per_day)])


def quantile_forecast(point, history_residuals, levels=DEFAULT_LEVELS) -> np.ndarray:
    """Point forecast plus empirical per-hour residual quantiles.

    Parameters
    ----------
    point : Forecast or array of shape (T,)
        Point forecast of the day.
    history_residuals : array of shape (D, T)
        Past residuals (observed minus forecast), ``D >= 5``.
    levels : array of shape (Q,)
        Strictly increasing levels in (0, 1).

    Returns
    -------
    ndarray of shape (Q, T)
        Rows nondecreasing in the level at every hour.
    """
    net = point.net if isinstance(point, Forecast) else _vec(point, "point")
    R = np.asarray(history_residuals, dtype=float)
    if R.ndim != 2 or R.shape[1] != net.shape[0]:
        raise ValueError(f"history_residuals must have shape (D, {net.shape[0]})")
    if R.shape[0] < MIN_RESIDUAL_DAYS:
        raise ValueError(f"need at least {MIN_RESIDUAL_DAYS} residual days, got {R.shape[0]}")
    q = np.asarray(levels, dtype=float)
    if q.ndim != 1 or np.any((q <= 0) | (q >= 1)) or np.any(np.diff(q) <= 0):
        raise ValueError("levels must be strictly increasing in (0, 1)")
    out = net[None, :] + np.quantile(R, q, axis=0)
    return np.maximum.accumulate(out, axis=0)


def _level_name(q: float) -> str:
    return f"q_{int(round(q * 100)):02d}"


def forecasts_to_csv(forecasts: Sequence[Forecast], first_day: int = 0) -> str:
    """CSV text with one row per (day, hour); quantile columns when present."""
    levels = next((f.levels for f in forecasts if f.quantiles is not None), None)
    header = ["day", "hour", "net", "baseload_net", "flexible", "shift_up", "shift_down", "shed_kept"]
    if levels is not None:
        header += [_level_name(q) for q in levels]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for i, f in enumerate(forecasts):
        for t in range(f.T):
            row = [first_day + i, t] + [repr(float(v[t])) for v in
                                        (f.net, f.baseload_net, f.flexible, f.shift_up, f.shift_down, f.shed_kept)]
            if levels is not None:
                row += [repr(float(x)) for x in f.quantiles[:, t]] if f.quantiles is not None else [""] * len(levels)
            w.writerow(row)
    return buf.getvalue()
