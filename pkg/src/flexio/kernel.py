"""Kernel decision rules mapping exogenous features to flexibility envelopes.

Each envelope family is an affine function of kernel evaluations against every
training cell::

    env[s, t] = beta0 + sum_{s', t'} beta[s', t'] * exp(-gamma * ||xi[s, t] - xi[s', t']||)

with the Euclidean norm.  During training the rule enters the learning problem
as a linear constraint on the envelopes: they must lie in the range of the
design matrix ``[1 | G]``.  Directions whose singular values fall below
``RANK_TOL`` relative to the largest are treated as outside that range, which
keeps the recovered coefficients well conditioned and makes re-evaluating the
rule at the anchors reproduce the fitted envelopes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from .model import FlexBounds

__all__ = [
    "FAMILIES",
    "FeatureScaler",
    "KernelEnvelopeModel",
    "TrainExpr",
    "RuleSpace",
    "gram_row",
    "gram_matrix",
    "envelope_train_expr",
    "envelope_forecast",
]

FAMILIES = ("sf_plus", "sf_minus", "sd")
RANK_TOL = 1e-6


@dataclass(frozen=True)
class FeatureScaler:
    """Affine feature transform fitted on training cells only.

    ``mode='standardize'`` maps to zero mean and unit variance, ``'minmax'``
    to the interval [-0.5, 0.5], ``'none'`` leaves features untouched.
    Constant columns are only centred.
    """

    mode: str
    center: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X, mode: str = "standardize") -> "FeatureScaler":
        X = np.asarray(X, dtype=float).reshape(-1, np.shape(X)[-1])
        F = X.shape[1]
        if mode == "standardize":
            center, scale = X.mean(0), X.std(0)
        elif mode == "minmax":
            lo, hi = X.min(0), X.max(0)
            center, scale = 0.5 * (lo + hi), hi - lo
        elif mode == "none":
            center, scale = np.zeros(F), np.ones(F)
        else:
            raise ValueError(f"unknown feature scaling {mode!r}")
        scale = np.where(scale > 0, scale, 1.0)
        return cls(mode, center, scale)

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.center.shape[0]:
            raise ValueError(f"expected {self.center.shape[0]} features, got {X.shape[-1]}")
        return (X - self.center) / self.scale


def _check_features(X, name="features") -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contain non-finite values")
    return X


def gram_matrix(queries, anchors, gamma: float) -> np.ndarray:
    """Kernel values between every query row and every anchor cell."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    Q = _check_features(queries, "query features")
    A = _check_features(anchors, "anchor features")
    A = A.reshape(-1, A.shape[-1])
    Q = Q.reshape(-1, Q.shape[-1])
    if Q.shape[1] != A.shape[1]:
        raise ValueError(f"queries have {Q.shape[1]} features, anchors have {A.shape[1]}")
    return np.exp(-gamma * cdist(Q, A))


def gram_row(query, anchors, gamma: float) -> np.ndarray:
    """Kernel values of one feature vector against all ``S*T`` anchors."""
    q = np.asarray(query, dtype=float).reshape(1, -1)
    return gram_matrix(q, anchors, gamma)[0]


class RuleSpace:
    """Range of the design matrix ``[1 | G]`` of one envelope family.

    ``constraints`` holds an orthonormal basis of the discarded directions:
    a training envelope vector ``e`` (flattened day-major) is representable
    iff ``constraints @ e == 0``.
    """

    def __init__(self, anchors, gamma: float, rank_tol: float = RANK_TOL):
        G = gram_matrix(anchors.reshape(-1, anchors.shape[-1]), anchors, gamma)
        D = np.hstack([np.ones((G.shape[0], 1)), G])
        U, sig, Vt = np.linalg.svd(D, full_matrices=True)
        keep = sig > rank_tol * sig[0]
        r = int(keep.sum())
        self.gamma = gamma
        self.design = D
        self._U_r, self._sig_r, self._V_r = U[:, :r], sig[:r], Vt[:r].T
        self.constraints = U[:, r:].T
        self.rank = r

    def coefficients(self, env) -> tuple[float, np.ndarray]:
        """Minimum-norm ``(beta0, beta)`` reproducing ``env`` on the kept range."""
        e = np.asarray(env, dtype=float).reshape(-1)
        coef = self._V_r @ ((self._U_r.T @ e) / self._sig_r)
        return float(coef[0]), coef[1:]

    def evaluate(self, beta0: float, beta) -> np.ndarray:
        return self.design @ np.concatenate([[beta0], np.asarray(beta, float).reshape(-1)])


@dataclass(frozen=True)
class TrainExpr:
    """Affine expression ``beta0 + row @ beta`` for one training cell."""

    row: np.ndarray

    def value(self, beta0: float, beta) -> float:
        return float(beta0 + self.row @ np.asarray(beta, float).reshape(-1))


@dataclass(frozen=True)
class KernelEnvelopeModel:
    """Fitted coefficients of the three envelope rules.

    ``anchors`` are the scaled training features, shape (S, T, F); ``scaler``
    maps raw features to that space.
    """

    beta0_plus: float
    beta0_minus: float
    beta0_sd: float
    beta_plus: np.ndarray
    beta_minus: np.ndarray
    beta_sd: np.ndarray
    gammas: tuple
    anchors: np.ndarray
    scaler: Optional[FeatureScaler] = field(default=None)

    def __post_init__(self):
        if len(self.gammas) != 3 or min(self.gammas) <= 0:
            raise ValueError("need three positive bandwidths")
        anchors = _check_features(self.anchors, "anchors")
        if anchors.ndim != 3:
            raise ValueError("anchors must have shape (S, T, F)")
        for name in ("beta_plus", "beta_minus", "beta_sd"):
            beta = np.asarray(getattr(self, name), dtype=float)
            if beta.shape != anchors.shape[:2]:
                raise ValueError(f"{name} has shape {beta.shape}, expected {anchors.shape[:2]}")
            object.__setattr__(self, name, beta)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))

    @property
    def S(self) -> int:
        return self.anchors.shape[0]

    @property
    def T(self) -> int:
        return self.anchors.shape[1]

    def family(self, name: str) -> tuple[float, np.ndarray, float]:
        i = FAMILIES.index(name)
        beta0 = (self.beta0_plus, self.beta0_minus, self.beta0_sd)[i]
        beta = (self.beta_plus, self.beta_minus, self.beta_sd)[i]
        return beta0, beta, self.gammas[i]

    @classmethod
    def zeros(cls, anchors, gammas, scaler=None) -> "KernelEnvelopeModel":
        z = np.zeros(np.shape(anchors)[:2])
        return cls(0.0, 0.0, 0.0, z, z, z, tuple(gammas), anchors, scaler)

    def raw(self, features) -> np.ndarray:
        """Unclipped rule values for raw feature rows, shape (3, M)."""
        X = np.asarray(features, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if self.scaler is not None:
            X = self.scaler.transform(X)
        out = []
        for name in FAMILIES:
            beta0, beta, gamma = self.family(name)
            out.append(beta0 + gram_matrix(X, self.anchors, gamma) @ beta.reshape(-1))
        return np.array(out)


def envelope_train_expr(model: KernelEnvelopeModel, s: int, t: int, family: str = "sf_plus") -> TrainExpr:
    """Training-time rule of one cell as an affine expression in the coefficients."""
    if not (0 <= s < model.S and 0 <= t < model.T):
        raise IndexError(f"cell ({s}, {t}) outside ({model.S}, {model.T})")
    _, _, gamma = model.family(family)
    return TrainExpr(gram_row(model.anchors[s, t], model.anchors, gamma))


def envelope_forecast(model: KernelEnvelopeModel, features_day, bounds: Optional[FlexBounds] = None):
    """Envelopes for a new day: rule values clipped below at 0 and above at ``bounds``."""
    X = _check_features(features_day)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[1] != model.anchors.shape[2]:
        raise ValueError(f"features_day has {X.shape[1]} features, model expects {model.anchors.shape[2]}")
    values = np.maximum(model.raw(X), 0.0)
    if bounds is not None:
        if bounds.T != X.shape[0]:
            raise ValueError("bounds horizon does not match features_day")
        values = np.minimum(values, bounds.as_array())
    return values[0], values[1], values[2]
