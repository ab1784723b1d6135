"""Domain types, consumer utility, forgetting weights and tariff construction.

All containers are frozen dataclasses holding read-only float arrays, so they
can be shared freely between solver calls.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Optional

import numpy as np


def _vec(x, name: str, length: Optional[int] = None) -> np.ndarray:
    arr = np.array(x, dtype=float, copy=True)
    if arr.ndim == 0:
        if length is None:
            arr = arr.reshape(1)
        else:
            arr = np.full(length, float(arr))
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise ValueError(f"{name} has length {arr.shape[0]}, expected {length}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


def _nonneg(arr: np.ndarray, name: str) -> None:
    if np.any(arr < 0):
        raise ValueError(f"{name} must be nonnegative")


class _Vectors:
    """Mixin: coerce every field to a read-only vector of a common length."""

    _nonnegative: tuple = ()

    def __post_init__(self):
        length = None
        for f in fields(self):
            value = getattr(self, f.name)
            arr = _vec(value, f.name, length)
            if length is None:
                length = arr.shape[0]
            elif arr.shape[0] != length:
                raise ValueError(f"{f.name} has length {arr.shape[0]}, expected {length}")
            if f.name in self._nonnegative:
                _nonneg(arr, f.name)
            object.__setattr__(self, f.name, arr)

    @property
    def T(self) -> int:
        return getattr(self, fields(self)[0].name).shape[0]


@dataclass(frozen=True)
class Horizon:
    T: int = 24
    S: int = 1

    def __post_init__(self):
        if int(self.T) < 1 or int(self.S) < 1:
            raise ValueError("Horizon needs T >= 1 and S >= 1")


@dataclass(frozen=True)
class PriceSignal(_Vectors):
    """Energy tariff ``p`` and the three flexibility incentive prices."""

    p: np.ndarray
    p_sf_plus: np.ndarray
    p_sf_minus: np.ndarray
    p_sd: np.ndarray
    _nonnegative = ("p", "p_sf_plus", "p_sf_minus", "p_sd")


@dataclass(frozen=True)
class ComfortCosts(_Vectors):
    c_sf_plus: np.ndarray
    c_sf_minus: np.ndarray
    c_sd: np.ndarray
    _nonnegative = ("c_sf_plus", "c_sf_minus", "c_sd")


@dataclass(frozen=True)
class FlexBounds(_Vectors):
    """Physical caps ``K`` on the three flexibility envelopes of one day."""

    K_sf_plus: np.ndarray
    K_sf_minus: np.ndarray
    K_sd: np.ndarray
    _nonnegative = ("K_sf_plus", "K_sf_minus", "K_sd")

    def as_array(self) -> np.ndarray:
        return np.vstack([self.K_sf_plus, self.K_sf_minus, self.K_sd])


@dataclass(frozen=True)
class DemandAttributes(_Vectors):
    """Baseload profile plus one day's shift-up, shift-down and shed envelopes."""

    d_bl: np.ndarray
    env_sf_plus: np.ndarray
    env_sf_minus: np.ndarray
    env_sd: np.ndarray
    _nonnegative = ("d_bl", "env_sf_plus", "env_sf_minus", "env_sd")

    def check_bounds(self, bounds: FlexBounds, atol: float = 1e-9) -> None:
        for env, cap, name in zip(
            (self.env_sf_plus, self.env_sf_minus, self.env_sd),
            (bounds.K_sf_plus, bounds.K_sf_minus, bounds.K_sd),
            ("env_sf_plus", "env_sf_minus", "env_sd"),
        ):
            if np.any(env > cap + atol):
                raise ValueError(f"{name} exceeds its physical bound")


@dataclass(frozen=True)
class FlexDecision:
    """Consumer decision for one day: shift amounts, shed amount, shift binaries."""

    d_sf_plus: np.ndarray
    d_sf_minus: np.ndarray
    d_sd_minus: np.ndarray
    delta_plus: np.ndarray
    delta_minus: np.ndarray

    def __post_init__(self):
        T = np.asarray(self.d_sf_plus).shape[0]
        for name in ("d_sf_plus", "d_sf_minus", "d_sd_minus"):
            arr = _vec(getattr(self, name), name, T)
            _nonneg(arr, name)
            object.__setattr__(self, name, arr)
        for name in ("delta_plus", "delta_minus"):
            arr = np.array(getattr(self, name), dtype=int).reshape(-1)
            if arr.shape[0] != T or np.any((arr != 0) & (arr != 1)):
                raise ValueError(f"{name} must be a binary vector of length {T}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return self.d_sf_plus.shape[0]

    @classmethod
    def zeros(cls, T: int) -> "FlexDecision":
        z = np.zeros(T)
        return cls(z, z, z, np.zeros(T, int), np.zeros(T, int))

    def violations(self, attrs: DemandAttributes, t_max: Optional[int] = None) -> dict:
        """Amount by which each defining constraint of the feasible set is broken."""
        out = {
            "shift_up_cap": float(np.max(self.d_sf_plus - attrs.env_sf_plus * self.delta_plus, initial=0.0)),
            "shift_down_cap": float(np.max(self.d_sf_minus - attrs.env_sf_minus * self.delta_minus, initial=0.0)),
            "shed_cap": float(np.max(self.d_sd_minus - attrs.env_sd, initial=0.0)),
            "neutrality": float(abs(self.d_sf_plus.sum() - self.d_sf_minus.sum())),
            "exclusion": float(np.max(self.delta_plus + self.delta_minus - 1, initial=0)),
        }
        if t_max is not None:
            out["cardinality"] = float(max(int(self.delta_plus.sum() + self.delta_minus.sum()) - t_max, 0))
        return out

    def is_feasible(self, attrs: DemandAttributes, t_max: Optional[int] = None, tol: float = 1e-9) -> bool:
        return all(v <= tol for v in self.violations(attrs, t_max).values())


@dataclass(frozen=True)
class DaySample:
    demand_hat: np.ndarray
    gen_hat: np.ndarray
    features: np.ndarray
    day_index: int = 0

    def __post_init__(self):
        d = _vec(self.demand_hat, "demand_hat")
        g = _vec(self.gen_hat, "gen_hat", d.shape[0])
        _nonneg(g, "gen_hat")
        X = np.array(self.features, dtype=float, copy=True)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2 or X.shape[0] != d.shape[0]:
            raise ValueError(f"features must have shape (T, F) with T={d.shape[0]}, got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain non-finite values")
        X.setflags(write=False)
        object.__setattr__(self, "demand_hat", d)
        object.__setattr__(self, "gen_hat", g)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "day_index", int(self.day_index))

    @property
    def T(self) -> int:
        return self.demand_hat.shape[0]


@dataclass(frozen=True)
class Hyperparams:
    t_max: int = 8
    alpha: float = 0.0
    gamma_sf_plus: float = 1.0
    gamma_sf_minus: float = 1.0
    gamma_sd: float = 1.0
    p_norm: int = field(default=2)

    def __post_init__(self):
        if int(self.t_max) < 0:
            raise ValueError("t_max must be >= 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if min(self.gammas) <= 0:
            raise ValueError("kernel bandwidths must be > 0")
        if self.p_norm != 2:
            raise ValueError("only p_norm=2 is supported")

    @property
    def gammas(self) -> tuple:
        return (self.gamma_sf_plus, self.gamma_sf_minus, self.gamma_sd)

    def validate(self, T: int) -> None:
        if self.t_max > T:
            raise ValueError(f"t_max={self.t_max} exceeds T={T}")


def _check_lengths(T: int, **vectors) -> None:
    for name, v in vectors.items():
        if v.T != T:
            raise ValueError(f"{name} has horizon {v.T}, expected {T}")


def utility_terms(theta: FlexDecision, prices: PriceSignal, costs: ComfortCosts,
                  attrs: DemandAttributes, gen) -> tuple[np.ndarray, np.ndarray]:
    """Per-hour comfort cost ``Q_t`` and financial exchange ``L_t``."""
    T = theta.T
    _check_lengths(T, prices=prices, costs=costs, attrs=attrs)
    g = _vec(gen, "gen", T)
    up, down, shed = theta.d_sf_plus, theta.d_sf_minus, theta.d_sd_minus
    Q = -costs.c_sf_plus * up**2 - costs.c_sf_minus * down**2 - costs.c_sd * shed**2
    consumption = attrs.d_bl + up - down + attrs.env_sd - shed - g
    L = prices.p_sf_plus * up + prices.p_sf_minus * down + prices.p_sd * shed - prices.p * consumption
    return Q, L


def consumer_utility(theta: FlexDecision, prices: PriceSignal, costs: ComfortCosts,
                     attrs: DemandAttributes, gen) -> float:
    """Consumer utility of a flexibility decision (to be maximised)."""
    Q, L = utility_terms(theta, prices, costs, attrs, gen)
    return float(np.sum(Q + L))


def compute_weights(alpha: float, S: int) -> np.ndarray:
    """Normalised forgetting weights ``(s/S)**alpha``; recent days weigh more."""
    if alpha < 0 or S < 1:
        raise ValueError("need alpha >= 0 and S >= 1")
    raw = (np.arange(1, S + 1) / S) ** float(alpha)
    return raw / raw.sum()


class ShedRule(str, Enum):
    MEAN_SHIFT_UP = "mean_shift_up"
    ZERO = "zero"


def build_tou_prices(flat: float, tou, shed_rule: ShedRule | str = ShedRule.MEAN_SHIFT_UP) -> PriceSignal:
    """Incentive prices implied by a flat tariff and a time-of-use schedule.

    Shifting up pays ``max(flat - tou, 0)``, shifting down pays
    ``max(tou - flat, 0)``; the shedding price is the daily mean of the
    shift-up incentive, applied to every hour.
    """
    tou = _vec(tou, "tou")
    if flat <= 0:
        raise ValueError("flat tariff must be positive")
    _nonneg(tou, "tou")
    T = tou.shape[0]
    up = np.maximum(flat - tou, 0.0)
    down = np.maximum(tou - flat, 0.0)
    rule = ShedRule(shed_rule)
    shed = np.full(T, up.sum() / T) if rule is ShedRule.MEAN_SHIFT_UP else np.zeros(T)
    return PriceSignal(np.full(T, float(flat)), up, down, shed)


def build_comfort_costs(prices: PriceSignal, flat: float, tou, c_sd=None) -> ComfortCosts:
    """Quadratic comfort costs from the tariff spread.

    A shift direction costs ``|flat - tou|`` in the hours where it earns no
    incentive and nothing otherwise.  Unless ``c_sd`` is given, the shedding
    cost is the mean of the day's nonzero shift costs.
    """
    tou = _vec(tou, "tou", prices.T)
    spread = np.abs(flat - tou)
    c_up = np.where(prices.p_sf_plus == 0, spread, 0.0)
    c_down = np.where(prices.p_sf_minus == 0, spread, 0.0)
    if c_sd is None:
        nonzero = np.concatenate([c_up[c_up > 0], c_down[c_down > 0]])
        c_sd = nonzero.mean() if nonzero.size else 0.0
    return ComfortCosts(c_up, c_down, _vec(c_sd, "c_sd", prices.T))
