"""Point and probabilistic error metrics plus a seasonal-naive benchmark.

CRPS is approximated through its quantile representation
``CRPS = 2 * integral_0^1 QL_q dq``, discretised as twice the plain average of
pinball losses over a fixed level grid (no trapezoid weights).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DEFAULT_LEVELS",
    "mae",
    "rmse",
    "pinball",
    "crps_from_quantiles",
    "seasonal_naive",
    "EvalReport",
    "evaluate",
]

#: 0.01, 0.05, 0.10, ..., 0.95, 0.99 (21 levels, symmetric about 0.5)
DEFAULT_LEVELS = np.round(np.concatenate([[0.01], np.arange(1, 20) * 0.05, [0.99]]), 10)
DEFAULT_LEVELS.setflags(write=False)


def _pair(true, fo):
    y = np.asarray(true, dtype=float)
    f = np.asarray(fo, dtype=float)
    if y.shape != f.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {f.shape}")
    if y.size == 0:
        raise ValueError("need at least one observation")
    return y, f


def mae(true, fo) -> float:
    y, f = _pair(true, fo)
    return float(np.mean(np.abs(y - f)))


def rmse(true, fo) -> float:
    y, f = _pair(true, fo)
    return float(np.sqrt(np.mean((y - f) ** 2)))


def _check_levels(levels) -> np.ndarray:
    q = np.asarray(levels, dtype=float)
    if np.any((q <= 0) | (q >= 1)):
        raise ValueError("quantile levels must lie strictly between 0 and 1")
    return q


def pinball(q_level, q_value, y):
    """Quantile loss ``q*(y-v)`` if ``y >= v`` else ``(1-q)*(v-y)``; broadcasts."""
    q = _check_levels(q_level)
    v = np.asarray(q_value, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.where(y >= v, q * (y - v), (1 - q) * (v - y))
    return float(out) if out.ndim == 0 else out


def crps_from_quantiles(levels, values, y):
    """Quantile-based CRPS proxy.

    Parameters
    ----------
    levels : array of shape (Q,)
        Increasing quantile levels in (0, 1).
    values : array of shape (Q,) or (Q, T)
        Quantile forecasts, nondecreasing along the first axis.
    y : scalar or array of shape (T,)
        Observations.

    Returns
    -------
    float or ndarray
        ``2 * mean_q pinball(q, values_q, y)``, per hour when ``values`` is 2-D.
    """
    q = _check_levels(levels)
    v = np.asarray(values, dtype=float)
    if v.shape[0] != q.shape[0]:
        raise ValueError(f"{v.shape[0]} quantile rows for {q.shape[0]} levels")
    if np.any(np.diff(q) <= 0):
        raise ValueError("levels must be strictly increasing")
    if np.any(np.diff(v, axis=0) < 0):
        raise ValueError("quantile values must be nondecreasing in the level")
    qq = q.reshape((-1,) + (1,) * (v.ndim - 1))
    losses = pinball(qq, v, np.asarray(y, dtype=float))
    out = 2.0 * np.mean(losses, axis=0)
    return float(out) if np.ndim(out) == 0 else out


def seasonal_naive(history, lookback: int = 7) -> np.ndarray:
    """Per-hour mean of the last ``lookback`` days of an (S, T) history."""
    H = np.asarray(history, dtype=float)
    if H.ndim != 2:
        raise ValueError("history must have shape (S, T)")
    if lookback < 1:
        raise ValueError("lookback must be >= 1")
    if H.shape[0] < lookback:
        raise ValueError(f"need {lookback} days of history, got {H.shape[0]}")
    return H[-lookback:].mean(axis=0)


@dataclass(frozen=True)
class EvalReport:
    """Errors of forecasts against observations over one or more days.

    ``crps_mean`` pools every (day, hour) cell; ``crps_daily`` first averages
    per day.  Both equal the plain mean when every day has the same length,
    the per-day values are kept for reporting.
    """

    mae: float
    rmse: float
    crps_mean: float
    per_hour_mae: np.ndarray
    per_hour_rmse: np.ndarray
    per_hour_crps: np.ndarray
    pinball_by_level: np.ndarray
    levels: np.ndarray
    crps_daily: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["metric", "value"])
        w.writerow(["mae", repr(self.mae)])
        w.writerow(["rmse", repr(self.rmse)])
        w.writerow(["crps", repr(self.crps_mean)])
        for q, v in zip(self.levels, self.pinball_by_level):
            w.writerow([f"pinball_{q:g}", repr(float(v))])
        w.writerow([])
        w.writerow(["hour", "mae", "rmse", "crps"])
        for t in range(self.per_hour_mae.shape[0]):
            w.writerow([t, repr(float(self.per_hour_mae[t])), repr(float(self.per_hour_rmse[t])),
                        repr(float(self.per_hour_crps[t]))])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'metric':<12}{'value':>12}",
                 f"{'MAE':<12}{self.mae:>12.4f}",
                 f"{'RMSE':<12}{self.rmse:>12.4f}"]
        if np.isfinite(self.crps_mean):
            lines.append(f"{'CRPS':<12}{self.crps_mean:>12.4f}")
        for q, v in zip(self.levels, self.pinball_by_level):
            if np.isfinite(v) and (np.isclose(q, 0.05) or np.isclose(q, 0.95)):
                lines.append(f"{'q' + format(q, 'g'):<12}{v:>12.4f}")
        return "\n".join(lines)


def evaluate(true, point, quantiles=None, levels=DEFAULT_LEVELS) -> EvalReport:
    """Score point (and optional quantile) forecasts.

    ``true`` and ``point`` have shape (D, T); ``quantiles`` has shape (D, Q, T).
    """
    y = np.atleast_2d(np.asarray(true, dtype=float))
    f = np.atleast_2d(np.asarray(point, dtype=float))
    _pair(y, f)
    err = y - f
    levels = np.asarray(levels, dtype=float)
    if quantiles is None:
        crps_cells = np.full(y.shape, np.nan)
        pin = np.full(levels.shape[0], np.nan)
    else:
        Qv = np.asarray(quantiles, dtype=float)
        if Qv.ndim == 2:
            Qv = Qv[None]
        if Qv.shape != (y.shape[0], levels.shape[0], y.shape[1]):
            raise ValueError(f"quantiles have shape {Qv.shape}, expected {(y.shape[0], levels.shape[0], y.shape[1])}")
        crps_cells = np.array([crps_from_quantiles(levels, Qv[d], y[d]) for d in range(y.shape[0])])
        pin = np.mean(pinball(levels[None, :, None], Qv, y[:, None, :]), axis=(0, 2))
    return EvalReport(
        mae=mae(y, f),
        rmse=rmse(y, f),
        crps_mean=float(np.mean(crps_cells)),
        per_hour_mae=np.mean(np.abs(err), axis=0),
        per_hour_rmse=np.sqrt(np.mean(err**2, axis=0)),
        per_hour_crps=np.mean(crps_cells, axis=0),
        pinball_by_level=pin,
        levels=levels,
        crps_daily=np.mean(crps_cells, axis=1),
    )
