"""Inverse-optimisation fit: recover baseload and flexibility envelopes.

The learning problem minimises the weighted squared reconstruction error of
observed net demand subject to every day's consumer decision being a KKT point
of that day's flexibility problem, with the shift binaries chosen at the upper
level and the envelopes tied to the kernel rules.

Working formulation
-------------------
For fixed binaries a shift cell that is switched on responds with
``d = clip((a + sigma*kappa) / 2c, 0, env)``.  When an envelope family is not
restricted by its kernel rule, the envelope can be chosen after the fact, so
the upper level may place ``d`` anywhere in ``[0, min(K, x*(kappa))]``:
this is the linear condition ``2 c d <= a + sigma*kappa``, which for a
zero-cost hour reads ``a + sigma*kappa >= 0``.  Likewise the kept part of the
sheddable demand may be anywhere in ``[0, max(K - x0, 0)]`` with
``x0 = a0 / 2c0``.  For fixed binaries the learning problem is then a convex QP
in ``(d_bl, kappa, d, kept)``.

A binary that is still open is relaxed through the convex hull of its two
states (off: ``d = 0``; on: the condition above), written with a private copy
of ``kappa`` per cell; no big-M constants are needed.  Families whose kernel
rule removes directions from the envelope space keep explicit envelope
variables, and the envelope-cap complementarity of their cells is branched on
as an SOS1 pair.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from ._qp import solve_stacked
from .fop import (
    FopSolution,
    _solution,
    kkt_residual,
    solve_fop,
    solve_shed,
    solve_shift_given_binaries,
)
from .kernel import FAMILIES, FeatureScaler, KernelEnvelopeModel, RuleSpace
from .model import (
    ComfortCosts,
    DaySample,
    DemandAttributes,
    FlexBounds,
    Hyperparams,
    PriceSignal,
    compute_weights,
    consumer_utility,
)

__all__ = [
    "SolverMode",
    "FitConfig",
    "FitResult",
    "FitReport",
    "fit",
    "reconstruction_loss",
    "verify_fit",
    "weighted_median",
]

log = logging.getLogger(__name__)

_INT_TOL = 1e-6
_PAIR_TOL = 1e-7
#: problems up to this many day-hour cells get the joint polish sweep by default
POLISH_CELLS = 200
SMALL_RESTARTS = 4
PAIR_CELLS = 50


class SolverMode(str, Enum):
    EXACT_BNB = "exact_bnb"
    ALTERNATING = "alternating"

    @classmethod
    def parse(cls, value) -> "SolverMode":
        aliases = {"exact": cls.EXACT_BNB, "exact_bnb": cls.EXACT_BNB, "alternating": cls.ALTERNATING}
        if isinstance(value, cls):
            return value
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown solver mode {value!r}") from None


@dataclass(frozen=True)
class FitConfig:
    hyper: Hyperparams = field(default_factory=Hyperparams)
    solver_mode: SolverMode = SolverMode.ALTERNATING
    max_iters: int = 50
    tol_obj: float = 1e-8
    tol_kkt: float = 1e-8
    seed: int = 0
    feature_scaling: str = "standardize"
    max_nodes: int = 20_000
    day_max_nodes: int = 2_000
    polish: Optional[bool] = None
    restarts: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "solver_mode", SolverMode.parse(self.solver_mode))
        if self.tol_obj <= 0 or self.tol_kkt <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1 or self.max_nodes < 1 or self.day_max_nodes < 1:
            raise ValueError("iteration and node limits must be positive")


@dataclass(frozen=True)
class FitResult:
    d_bl: np.ndarray
    envelope_model: KernelEnvelopeModel
    per_day: list
    training_loss: float
    kkt_max_residual: float
    iterations: int
    envelopes: np.ndarray
    weights: np.ndarray
    mode: SolverMode = SolverMode.ALTERNATING
    converged: bool = True
    lower_bound: float = 0.0
    nodes: int = 0

    @property
    def S(self) -> int:
        return len(self.per_day)

    @property
    def T(self) -> int:
        return self.d_bl.shape[0]

    def flexible(self) -> np.ndarray:
        """Per-day flexible component ``d_sf + d_sd``, shape (S, T)."""
        return np.array([sol.d_sf + sol.d_sd for sol in self.per_day])


def weighted_median(values, weights) -> np.ndarray:
    """Column-wise weighted median of an (S, T) array."""
    values = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    order = np.argsort(values, axis=0, kind="stable")
    v = np.take_along_axis(values, order, axis=0)
    cw = np.cumsum(w[order], axis=0)
    idx = np.argmax(cw >= 0.5 * w.sum(), axis=0)
    return v[idx, np.arange(values.shape[1])]


# --------------------------------------------------------------------------
# problem data


class _Problem:
    """Arrays of the learning problem, laid out as (family, day, hour)."""

    def __init__(self, train, bounds, prices, costs, hyper: Hyperparams, rules):
        S, T = len(train), train[0].T
        self.S, self.T = S, T
        self.t_max = int(hyper.t_max)
        self.omega = compute_weights(hyper.alpha, S)
        self.gen = np.array([d.gen_hat for d in train])
        self.y = np.array([d.demand_hat for d in train]) + self.gen
        self.K = np.array([[b.K_sf_plus, b.K_sf_minus, b.K_sd] for b in bounds]).transpose(1, 0, 2)
        self.a = np.array([[p.p_sf_plus - p.p, p.p_sf_minus + p.p, p.p_sd + p.p] for p in prices]).transpose(1, 0, 2)
        self.c = np.array([[c.c_sf_plus, c.c_sf_minus, c.c_sd] for c in costs]).transpose(1, 0, 2)
        self.sigma = (1.0, -1.0, 0.0)
        self.prices, self.costs = list(prices), list(costs)
        a0, c0 = self.a[2], self.c[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x0 = np.where(c0 > 0, np.maximum(a0 / (2 * np.where(c0 > 0, c0, 1.0)), 0.0),
                          np.where(a0 > 0, np.inf, 0.0))
        self.x0 = x0
        self.kmax = np.maximum(self.K[2] - x0, 0.0)
        self.kmax[~np.isfinite(self.kmax)] = 0.0
        # kappa range in which both directions can be switched on
        self.k_lo = np.full(S, np.inf)
        self.k_hi = np.full(S, -np.inf)
        self.shift_days = np.zeros(S, dtype=bool)
        for s in range(S):
            up, dn = self.K[0, s] > 0, self.K[1, s] > 0
            if up.any() and dn.any() and self.t_max >= 2:
                lo, hi = float(np.min(-self.a[0, s][up])), float(np.max(self.a[1, s][dn]))
                if lo <= hi:
                    self.k_lo[s], self.k_hi[s] = lo, hi
                    self.shift_days[s] = True
        self.rules = rules
        self.constrained = [r is not None and r.constraints.shape[0] > 0 for r in rules]

    def open_delta(self) -> np.ndarray:
        """Initial binary fixings: closed where no shift is possible."""
        fix = np.full((2, self.S, self.T), -1, dtype=int)
        fix[self.K[:2] <= 0] = 0
        fix[:, ~self.shift_days, :] = 0
        return fix


# --------------------------------------------------------------------------
# node QP


class _Vars:
    def __init__(self):
        self.n = 0

    def take(self, k: int) -> np.ndarray:
        idx = np.arange(self.n, self.n + k)
        self.n += k
        return idx


class _Rows:
    def __init__(self):
        self.r, self.c, self.v, self.b = [], [], [], []
        self.count = 0

    def add(self, cols, vals, rhs):
        self.r.extend([self.count] * len(cols))
        self.c.extend(cols)
        self.v.extend(vals)
        self.b.append(rhs)
        self.count += 1

    def add_dense(self, cols, M, rhs):
        """Append the rows of ``M @ x[cols] == rhs``."""
        for row, b in zip(M, rhs):
            nz = np.flatnonzero(row)
            self.add(np.asarray(cols)[nz], row[nz], b)


def _stack(E: _Rows, I: _Rows, n: int):
    """Equality rows followed by inequality rows as one CSC matrix."""
    rows = np.concatenate([np.asarray(E.r, dtype=np.int64), np.asarray(I.r, dtype=np.int64) + E.count])
    cols = np.concatenate([np.asarray(E.c, dtype=np.int64), np.asarray(I.c, dtype=np.int64)])
    vals = np.concatenate([np.asarray(E.v, dtype=float), np.asarray(I.v, dtype=float)])
    A = sp.csc_matrix((vals, (rows, cols)), shape=(E.count + I.count, n))
    return A, np.concatenate([np.asarray(E.b, dtype=float), np.asarray(I.b, dtype=float)])


@dataclass
class _Plan:
    """Upper-level point returned by a node QP."""

    objective: float
    d_bl: np.ndarray
    d: np.ndarray           # (3, S, T): shift up, shift down, kept part of sheddable demand
    env: np.ndarray         # (3, S, T), NaN where not modelled explicitly
    delta: np.ndarray       # (2, S, T) relaxed binaries
    kappa: np.ndarray       # (S,)
    marg: np.ndarray        # (2, S, T): a + sigma*kappa - 2 c d for shift cells


def _solve_node(P: _Problem, days, fix_delta, fix_pair, d_bl_fixed=None, joint_rules=True) -> Optional[_Plan]:
    """Convex relaxation of the learning problem under the given fixings.

    ``fix_delta`` (2, S, T) and ``fix_pair`` (3, S, T) hold -1 for open, 0/1
    for fixed.  Pair fixings only matter for families with explicit envelopes:
    0 means the envelope cap binds (``env == d``, resp. nothing is kept), 1
    means the cell sits strictly inside it (``2 c d == a + sigma*kappa``, resp.
    ``kept == env - x0``).
    """
    T = P.T
    days = list(days)
    V, E, I = _Vars(), _Rows(), _Rows()
    d_bl = V.take(T) if d_bl_fixed is None else None
    explicit = [joint_rules and P.constrained[f] for f in range(3)]
    kap, dvar, delv, envv, k1, k0, res = {}, {}, {}, {}, {}, {}, {}
    for s in days:
        if P.shift_days[s]:
            kap[s] = V.take(1)[0]
        for t in range(T):
            res[s, t] = V.take(1)[0]
            for f in (0, 1):
                if explicit[f]:
                    envv[f, s, t] = V.take(1)[0]
                if fix_delta[f, s, t] != 0:
                    dvar[f, s, t] = V.take(1)[0]
                    if fix_delta[f, s, t] < 0:
                        delv[f, s, t], k1[f, s, t], k0[f, s, t] = V.take(3)
            dvar[2, s, t] = V.take(1)[0]
            if explicit[2]:
                envv[2, s, t] = V.take(1)[0]
    n = V.n

    for s in days:
        for t in range(T):
            cols, vals = [res[s, t]], [1.0]
            rhs = -P.y[s, t]
            if d_bl is not None:
                cols.append(d_bl[t])
                vals.append(-1.0)
            else:
                rhs += d_bl_fixed[t]
            for f, sgn in ((0, -1.0), (1, 1.0), (2, -1.0)):
                if (f, s, t) in dvar:
                    cols.append(dvar[f, s, t])
                    vals.append(sgn)
            E.add(cols, vals, rhs)
    if d_bl is not None:
        for t in range(T):
            I.add([d_bl[t]], [-1.0], 0.0)

    for s in days:
        if s not in kap:
            continue
        ks, lo, hi = kap[s], P.k_lo[s], P.k_hi[s]
        I.add([ks], [1.0], hi)
        I.add([ks], [-1.0], -lo)
        up = [dvar[0, s, t] for t in range(T) if (0, s, t) in dvar]
        dn = [dvar[1, s, t] for t in range(T) if (1, s, t) in dvar]
        if up or dn:
            E.add(up + dn, [1.0] * len(up) + [-1.0] * len(dn), 0.0)
        card_cols, card_fixed = [], 0
        for t in range(T):
            excl_cols, excl_fixed = [], 0
            for f in (0, 1):
                fd = fix_delta[f, s, t]
                a, c, K, sg = P.a[f, s, t], P.c[f, s, t], P.K[f, s, t], P.sigma[f]
                if fd == 1:
                    excl_fixed += 1
                    card_fixed += 1
                elif fd < 0:
                    excl_cols.append(delv[f, s, t])
                    card_cols.append(delv[f, s, t])
                if fd == 0:
                    continue
                d = dvar[f, s, t]
                I.add([d], [-1.0], 0.0)
                if fd == 1:
                    I.add([d], [1.0], K)
                    I.add([d, ks], [2 * c, -sg], a)
                else:
                    dl, c1, c0 = delv[f, s, t], k1[f, s, t], k0[f, s, t]
                    I.add([d, dl], [1.0, -K], 0.0)
                    I.add([dl], [1.0], 1.0)
                    I.add([dl], [-1.0], 0.0)
                    E.add([ks, c1, c0], [1.0, -1.0, -1.0], 0.0)
                    I.add([c1, dl], [1.0, -hi], 0.0)
                    I.add([c1, dl], [-1.0, lo], 0.0)
                    I.add([c0, dl], [1.0, hi], hi)
                    I.add([c0, dl], [-1.0, -lo], -lo)
                    I.add([d, c1, dl], [2 * c, -sg, -a], 0.0)
            if excl_cols:
                I.add(excl_cols, [1.0] * len(excl_cols), 1.0 - excl_fixed)
            elif excl_fixed > 1:
                return None
        if card_cols:
            I.add(card_cols, [1.0] * len(card_cols), P.t_max - card_fixed)
        elif card_fixed > P.t_max:
            return None

    # explicit envelopes of rule-restricted shift families
    for f in (0, 1):
        if not explicit[f]:
            continue
        for s in days:
            for t in range(T):
                e = envv[f, s, t]
                I.add([e], [-1.0], 0.0)
                I.add([e], [1.0], P.K[f, s, t])
                if (f, s, t) in dvar:
                    d = dvar[f, s, t]
                    I.add([d, e], [1.0, -1.0], 0.0)
                    pf = fix_pair[f, s, t]
                    if pf == 0:
                        E.add([e, d], [1.0, -1.0], 0.0)
                    elif pf == 1 and s in kap:
                        E.add([d, kap[s]], [2 * P.c[f, s, t], -P.sigma[f]], P.a[f, s, t])
        cols = [envv[f, s, t] for s in days for t in range(T)]
        E.add_dense(cols, P.rules[f].constraints, np.zeros(P.rules[f].constraints.shape[0]))

    # kept part of the sheddable demand
    for s in days:
        for t in range(T):
            k = dvar[2, s, t]
            I.add([k], [-1.0], 0.0)
            I.add([k], [1.0], P.kmax[s, t])
            if not explicit[2]:
                continue
            e, K, x0 = envv[2, s, t], P.K[2, s, t], P.x0[s, t]
            I.add([e], [-1.0], 0.0)
            I.add([e], [1.0], K)
            I.add([k, e], [1.0, -1.0], 0.0)
            if np.isfinite(x0):
                I.add([e, k], [1.0, -1.0], x0)
            if K > 0:
                I.add([k, e], [K, -P.kmax[s, t]], 0.0)
            pf = fix_pair[2, s, t]
            if pf == 0:
                E.add([k], [1.0], 0.0)
                if np.isfinite(x0):
                    I.add([e], [1.0], x0)
            elif pf == 1 and np.isfinite(x0):
                E.add([k, e], [1.0, -1.0], -x0)
    if explicit[2]:
        cols = [envv[2, s, t] for s in days for t in range(T)]
        E.add_dense(cols, P.rules[2].constraints, np.zeros(P.rules[2].constraints.shape[0]))

    diag = np.zeros(n)
    for (s, t), j in res.items():
        diag[j] = 2.0 * P.omega[s]
    A, b = _stack(E, I, n)
    out = solve_stacked(diag, np.zeros(n), A, b, E.count, tol=1e-10)
    if not out.ok:
        return None
    x = out.x
    S = P.S
    d = np.zeros((3, S, T))
    env = np.full((3, S, T), np.nan)
    delta = np.zeros((2, S, T))
    kappa = np.zeros(S)
    for (f, s, t), j in dvar.items():
        d[f, s, t] = max(x[j], 0.0)
    for (f, s, t), j in envv.items():
        env[f, s, t] = x[j]
    for f in (0, 1):
        delta[f] = np.where(fix_delta[f] == 1, 1.0, 0.0)
    for (f, s, t), j in delv.items():
        delta[f, s, t] = min(max(x[j], 0.0), 1.0)
    for s, j in kap.items():
        kappa[s] = x[j]
    dbl = x[d_bl] if d_bl is not None else np.asarray(d_bl_fixed, float)
    marg = P.a[:2] + np.array(P.sigma[:2])[:, None, None] * kappa[None, :, None] - 2 * P.c[:2] * d[:2]
    return _Plan(float(out.objective), dbl, d, env, delta, kappa, marg)


# --------------------------------------------------------------------------
# turning a plan into exact lower-level solutions


@dataclass
class _Iterate:
    loss: float
    d_bl: np.ndarray
    env: np.ndarray          # (3, S, T)
    delta: np.ndarray        # (2, S, T) integer
    sols: list               # per day (d_up, d_dn, d_shed, kappa, dp, dm)

    def flex(self, P: _Problem) -> np.ndarray:
        return np.array([u - v + e - sh for (u, v, sh, _, _, _), e in zip(self.sols, self.env[2])])


def _closed_form_dbl(P: _Problem, flex) -> np.ndarray:
    return np.maximum(P.omega @ (P.y - flex) / P.omega.sum(), 0.0)


def _loss(P: _Problem, d_bl, flex) -> float:
    r = d_bl[None, :] + flex - P.y
    return float(np.sum(P.omega[:, None] * r**2))


def _round_delta(P: _Problem, plan: _Plan, fix_delta) -> np.ndarray:
    """Integral binaries near a relaxed point, honouring exclusion and cardinality."""
    out = np.where(fix_delta == 1, 1, 0)
    for s in range(P.S):
        if not P.shift_days[s]:
            continue
        used = int(out[:, s].sum())
        score = np.where(fix_delta[:, s] < 0, plan.delta[:, s], -1.0)
        for j in np.argsort(-score.reshape(-1), kind="stable"):
            f, t = divmod(int(j), P.T)
            if score[f, t] <= 0.5 or used >= P.t_max:
                break
            if out[1 - f, s, t]:
                continue
            out[f, s, t] = 1
            used += 1
    return out


def _envelopes_from_plan(P: _Problem, plan: _Plan, delta) -> np.ndarray:
    """Smallest envelopes that reproduce the plan where the rules allow a free choice."""
    env = np.zeros((3, P.S, P.T))
    for f in (0, 1):
        if P.constrained[f] and not np.isnan(plan.env[f]).any():
            env[f] = plan.env[f]
        else:
            env[f] = np.where(delta[f] == 1, plan.d[f], 0.0)
    if P.constrained[2] and not np.isnan(plan.env[2]).any():
        env[2] = plan.env[2]
    else:
        base = np.where(np.isfinite(P.x0), np.minimum(P.x0, P.K[2]), 0.0)
        env[2] = np.where(plan.d[2] > 0, plan.d[2] + base, base)
    return np.clip(env, 0.0, P.K)


def _lower_level(P: _Problem, env, delta, hint=None):
    """Exact consumer response for fixed binaries on every day."""
    sols = []
    for s in range(P.S):
        pr, co = P.prices[s], P.costs[s]
        shed = solve_shed(pr, co, env[2, s])
        dp, dm = delta[0, s], delta[1, s]
        th = None if hint is None else (hint[0, s], hint[1, s])
        up, dn, kappa = solve_shift_given_binaries(pr, co, env[0, s], env[1, s], dp, dm, tie_hint=th)
        sols.append((up, dn, shed, kappa, dp.copy(), dm.copy()))
    return sols


def _materialise(P: _Problem, env, delta, hint=None) -> _Iterate:
    sols = _lower_level(P, env, delta, hint)
    it = _Iterate(0.0, np.zeros(P.T), env, np.asarray(delta, dtype=int), sols)
    flex = it.flex(P)
    it.d_bl = _closed_form_dbl(P, flex)
    it.loss = _loss(P, it.d_bl, flex)
    return it


def _consumer_check(P: _Problem, it: _Iterate) -> _Iterate:
    """Replace any day whose decision is not globally optimal by the FOP optimum."""
    changed = False
    sols, delta = list(it.sols), it.delta.copy()
    for s in range(P.S):
        pr, co = P.prices[s], P.costs[s]
        attrs = DemandAttributes(np.zeros(P.T), it.env[0, s], it.env[1, s], it.env[2, s])
        best = solve_fop(pr, co, attrs, P.t_max, np.zeros(P.T))
        up, dn, shed, kappa, dp, dm = sols[s]
        mine = _solution(pr, co, attrs, np.zeros(P.T), up, dn, shed, dp, dm, kappa).utility
        if mine < best.utility - 1e-9 * (1.0 + abs(best.utility)):
            th = best.theta
            sols[s] = (th.d_sf_plus, th.d_sf_minus, th.d_sd_minus, best.certificate.kappa,
                       th.delta_plus.copy(), th.delta_minus.copy())
            delta[0, s], delta[1, s] = th.delta_plus, th.delta_minus
            changed = True
    if not changed:
        return it
    out = _Iterate(0.0, it.d_bl, it.env, delta, sols)
    flex = out.flex(P)
    out.d_bl = _closed_form_dbl(P, flex)
    out.loss = _loss(P, out.d_bl, flex)
    return out


# --------------------------------------------------------------------------
# branch-and-bound


def _violation(P: _Problem, plan: _Plan, fix_delta, fix_pair, days):
    """Most violated open decision: ('delta'|'pair', family, day, hour) and its size."""
    best, item = 0.0, None
    for s in days:
        for f in (0, 1):
            open_ = fix_delta[f, s] < 0
            frac = np.where(open_, np.minimum(plan.delta[f, s], 1.0 - plan.delta[f, s]), 0.0)
            t = int(np.argmax(frac))
            if frac[t] > best:
                best, item = float(frac[t]), ("delta", f, s, t)
        for f in range(3):
            if not P.constrained[f] or np.isnan(plan.env[f, s]).any():
                continue
            if f < 2:
                on = (fix_delta[f, s] == 1) | ((fix_delta[f, s] < 0) & (plan.delta[f, s] > 1 - _INT_TOL))
                gap = np.where(on & (fix_pair[f, s] < 0),
                               np.minimum(plan.env[f, s] - plan.d[f, s], plan.marg[f, s]), 0.0)
            else:
                x0 = np.where(np.isfinite(P.x0[s]), P.x0[s], np.inf)
                target = np.maximum(plan.env[2, s] - x0, 0.0)
                gap = np.where(fix_pair[2, s] < 0, np.abs(plan.d[2, s] - target), 0.0)
            t = int(np.argmax(gap))
            if gap[t] > max(best, _PAIR_TOL):
                if f < 2 and fix_delta[f, s, t] < 0:
                    best, item = float(gap[t]), ("delta", f, s, t)
                else:
                    best, item = float(gap[t]), ("pair", f, s, t)
    return item, best


def _children(item, fix_delta, fix_pair, plan: _Plan):
    kind, f, s, t = item
    kids = []
    for v in (0, 1):
        fd, fp = fix_delta.copy(), fix_pair.copy()
        if kind == "delta":
            fd[f, s, t] = v
            if v == 1:
                fd[1 - f, s, t] = 0
        else:
            fp[f, s, t] = v
        kids.append((fd, fp))
    lean = plan.delta[f, s, t] >= 0.5 if kind == "delta" else True
    # depth-first: the child matching the relaxation's lean is explored first
    return kids if lean else kids[::-1]


class _Search:
    def __init__(self, P: _Problem, days, d_bl_fixed, max_nodes, tol_obj, joint_rules=None):
        self.P, self.days = P, list(days)
        self.d_bl_fixed = d_bl_fixed
        self.max_nodes, self.tol_obj = max_nodes, tol_obj
        self.joint = d_bl_fixed is None if joint_rules is None else joint_rules
        self.best_val, self.best = np.inf, None
        self.nodes = 0
        self.lower = 0.0
        self.complete = False
        self._cache = {}

    def value(self, fix_delta_int, fix_pair=None):
        """Objective of the restricted problem with all binaries fixed (cached)."""
        key = fix_delta_int[:, self.days].tobytes()
        if fix_pair is None and key in self._cache:
            return self._cache[key]
        pair = np.full((3, self.P.S, self.P.T), -1, dtype=int) if fix_pair is None else fix_pair
        plan = _solve_node(self.P, self.days, fix_delta_int, pair, self.d_bl_fixed, self.joint)
        out = (np.inf, None) if plan is None else (plan.objective, plan)
        if fix_pair is None:
            self._cache[key] = out
        return out

    def offer(self, val, delta, plan):
        if not np.isfinite(self.best_val) or val < self.best_val - 1e-12 * (1.0 + abs(self.best_val)):
            self.best_val, self.best = val, (np.asarray(delta, int).copy(), plan)

    def run(self, root_delta, root_pair):
        """Depth-first search; ``complete`` is False if the node limit cut it short."""
        stack = [(root_delta, root_pair)]
        unconstrained = not any(self.P.constrained)
        while stack:
            if self.best_val <= self.tol_obj:
                stack.clear()
                break
            if self.nodes >= self.max_nodes:
                break
            fd, fp = stack.pop()
            plan = _solve_node(self.P, self.days, fd, fp, self.d_bl_fixed, self.joint)
            self.nodes += 1
            if plan is None or plan.objective >= self.best_val - self.tol_obj:
                continue
            if unconstrained:
                rounded = _round_delta(self.P, plan, fd)
                val, rplan = self.value(rounded)
                if rplan is not None:
                    self.offer(val, rounded, rplan)
            item, size = _violation(self.P, plan, fd, fp, self.days)
            if item is None or size <= _INT_TOL:
                self.offer(plan.objective, _round_delta(self.P, plan, fd), plan)
                continue
            if plan.objective >= self.best_val - self.tol_obj:
                continue
            stack.extend(_children(item, fd, fp, plan)[::-1])
        self.complete = not stack
        if self.complete and np.isfinite(self.best_val):
            self.lower = max(0.0, self.best_val - self.tol_obj)
        return self.best_val, self.best


# --------------------------------------------------------------------------
# modes


def _evaluate_delta(P: _Problem, delta, pair=None, check_consumer=False, joint_rules=True) -> Optional[_Iterate]:
    """Joint restricted problem for fixed binaries, then exact lower-level solves."""
    pair = np.full((3, P.S, P.T), -1, dtype=int) if pair is None else pair
    plan = _solve_node(P, range(P.S), delta, pair, None, joint_rules)
    if plan is None:
        return None
    env = _envelopes_from_plan(P, plan, delta)
    it = _materialise(P, env, delta, hint=plan.d[:2])
    return _consumer_check(P, it) if check_consumer else it


def _day_search(P: _Problem, s, d_bl, max_nodes, tol_obj, incumbent=None):
    """Best binaries of one day with the baseload held fixed."""
    root = P.open_delta()
    mask = np.zeros((2, P.S, P.T), dtype=bool)
    mask[:, s] = True
    root = np.where(mask, root, 0)
    pair = np.full((3, P.S, P.T), -1, dtype=int)
    search = _Search(P, [s], d_bl, max_nodes, tol_obj * P.omega[s])
    if incumbent is not None:
        start = np.where(mask, incumbent, 0)
        val, plan = search.value(start)
        if plan is not None:
            search.offer(val, start, plan)
    search.run(root, pair)
    if search.best is None:
        return None
    return search.best[0][:, s]


def _polish_enabled(P: _Problem, cfg: FitConfig) -> bool:
    if cfg.polish is None:
        return P.S * P.T <= POLISH_CELLS
    return bool(cfg.polish)


def _polish(P: _Problem, best: _Iterate, cfg: FitConfig) -> _Iterate:
    """Re-search the binaries of one day (and, on desk-scale problems, two days)
    at a time with the baseload free and every other day fixed."""
    days = [int(s) for s in np.flatnonzero(P.shift_days)]
    groups = [[s] for s in days]
    if P.S * P.T <= PAIR_CELLS:
        groups += [[a, b] for i, a in enumerate(days) for b in days[i + 1:]]
    for _ in range(cfg.max_iters):
        improved = False
        for group in groups:
            root = best.delta.copy()
            root[:, group] = P.open_delta()[:, group]
            search = _Search(P, range(P.S), None, cfg.day_max_nodes * len(group), cfg.tol_obj, joint_rules=False)
            val, plan = search.value(best.delta)
            if plan is not None:
                search.offer(val, best.delta, plan)
            search.run(root, np.full((3, P.S, P.T), -1, dtype=int))
            if search.best is None:
                continue
            cand = _evaluate_delta(P, search.best[0], check_consumer=True, joint_rules=False)
            if cand is not None and cand.loss < best.loss - cfg.tol_obj:
                best, improved = cand, True
        log.debug("polish sweep: loss %.6g", best.loss)
        if not improved:
            break
    return best


def _alternate_from(P: _Problem, cfg: FitConfig, best: _Iterate):
    d_bl = best.d_bl
    history = [best.loss]
    iterations = 0
    for it in range(cfg.max_iters):
        iterations = it + 1
        proposal = best.delta.copy()
        for s in range(P.S):
            if P.shift_days[s]:
                found = _day_search(P, s, d_bl, cfg.day_max_nodes, cfg.tol_obj, best.delta)
                if found is not None:
                    proposal[:, s] = found
        cand = _evaluate_delta(P, proposal, check_consumer=True, joint_rules=False)
        improved = cand is not None and cand.loss < best.loss - cfg.tol_obj
        if cand is not None and cand.loss < best.loss:
            best = cand
        d_bl = best.d_bl if cand is None else cand.d_bl
        history.append(best.loss)
        log.debug("alternating iteration %d: loss %.6g", iterations, best.loss)
        if not improved:
            break
    converged = iterations < cfg.max_iters or len(history) < 2 or history[-2] - history[-1] < cfg.tol_obj
    return best, iterations, converged


def _behavioural_starts(P: _Problem, n: int) -> list:
    """Binaries the consumer would pick under uniform envelopes of a few sizes."""
    scale = float(np.mean(np.abs(P.y)))
    out = []
    for rho in np.geomspace(0.05, 0.5, n) * scale:
        delta = np.zeros((2, P.S, P.T), dtype=int)
        for s in np.flatnonzero(P.shift_days):
            env = np.minimum(rho, P.K[:, s])
            attrs = DemandAttributes(np.zeros(P.T), env[0], env[1], env[2])
            sol = solve_fop(P.prices[s], P.costs[s], attrs, P.t_max, np.zeros(P.T))
            delta[0, s], delta[1, s] = sol.theta.delta_plus, sol.theta.delta_minus
        if not any(np.array_equal(delta, d) for d in out):
            out.append(delta)
    return out


def _alternating(P: _Problem, cfg: FitConfig):
    """Alternate per-day binary searches and joint re-solves.

    The first run starts without flexibility from the per-hour weighted
    median of the observations; ``cfg.restarts`` further runs start from
    consumer-optimal binaries under uniform envelopes.
    """
    median = weighted_median(P.y, P.omega)
    noflex = _materialise(P, np.zeros((3, P.S, P.T)), np.zeros((2, P.S, P.T), dtype=int))
    noflex.d_bl = median
    starts = [noflex]
    restarts = cfg.restarts
    if restarts is None:
        restarts = SMALL_RESTARTS if P.S * P.T <= POLISH_CELLS else 0
    for delta in _behavioural_starts(P, restarts) if restarts > 0 else []:
        start = _evaluate_delta(P, delta, check_consumer=True, joint_rules=False)
        if start is not None:
            starts.append(start)
    best, iterations, converged = None, 0, True
    for start in starts:
        cand, its, conv = _alternate_from(P, cfg, start)
        if _polish_enabled(P, cfg):
            cand = _polish(P, cand, cfg)
        iterations += its
        if best is None or cand.loss < best.loss - cfg.tol_obj:
            best, converged = cand, conv
    return best, iterations, converged


def _exact(P: _Problem, cfg: FitConfig):
    seed, iterations, _ = _alternating(P, cfg)
    search = _Search(P, range(P.S), None, cfg.max_nodes, cfg.tol_obj)
    search.best_val = seed.loss
    root_delta = P.open_delta()
    root_pair = np.full((3, P.S, P.T), -1, dtype=int)
    search.run(root_delta, root_pair)
    best = seed
    if search.best is not None:
        delta, plan = search.best
        cand = _materialise(P, _envelopes_from_plan(P, plan, delta), delta, hint=plan.d[:2])
        if cand.loss < best.loss:
            best = cand
    return best, iterations, search


# --------------------------------------------------------------------------
# public API


def _validate(train, bounds, prices, costs):
    S = len(train)
    if S < 1:
        raise ValueError("need at least one training day")
    for name, seq in (("bounds", bounds), ("prices", prices), ("costs", costs)):
        if len(seq) != S:
            raise ValueError(f"{name} has {len(seq)} entries for {S} training days")
    T, F = train[0].T, train[0].features.shape[1]
    for s, day in enumerate(train):
        if day.T != T or day.features.shape[1] != F:
            raise ValueError(f"training day {s} has inconsistent shape")
        for name, v in (("bounds", bounds[s]), ("prices", prices[s]), ("costs", costs[s])):
            if v.T != T:
                raise ValueError(f"{name}[{s}] has horizon {v.T}, expected {T}")
        if np.any(bounds[s].as_array() < 0):
            raise ValueError(f"bounds[{s}] are negative")
    return S, T


def _rule_spaces(anchors, gammas):
    cache, out = {}, []
    for g in gammas:
        if g not in cache:
            cache[g] = RuleSpace(anchors, g)
        out.append(cache[g])
    return out


def fit(train: Sequence[DaySample], bounds: Sequence[FlexBounds], prices: Sequence[PriceSignal],
        costs: Sequence[ComfortCosts], config: Optional[FitConfig] = None) -> FitResult:
    """Estimate baseload, envelope rules and per-day decisions from observed demand.

    Parameters
    ----------
    train : sequence of DaySample
        Observed net demand, generation and features, oldest day first.
    bounds, prices, costs : sequences, one entry per training day
        Physical envelope caps, tariff signals and comfort costs.
    config : FitConfig, optional
        Hyperparameters and solver settings.

    Returns
    -------
    FitResult
        Fitted model with per-day KKT-certified decisions.  In exact mode the
        loss is the global optimum within ``tol_obj`` unless ``converged`` is
        False (node limit reached).
    """
    cfg = config or FitConfig()
    S, T = _validate(train, bounds, prices, costs)
    cfg.hyper.validate(T)
    raw = np.array([d.features for d in train])
    scaler = FeatureScaler.fit(raw, cfg.feature_scaling)
    anchors = scaler.transform(raw)
    rules = _rule_spaces(anchors, cfg.hyper.gammas)
    P = _Problem(train, bounds, prices, costs, cfg.hyper, rules)

    lower, nodes = 0.0, 0
    if cfg.solver_mode is SolverMode.EXACT_BNB:
        best, iterations, search = _exact(P, cfg)
        converged, nodes = search.complete, search.nodes
        lower = search.lower if search.complete else 0.0
    else:
        best, iterations, converged = _alternating(P, cfg)

    # kernel coefficients, then the envelopes the rules actually produce
    coefs = [rules[f].coefficients(best.env[f]) for f in range(3)]
    env = np.array([rules[f].evaluate(*coefs[f]).reshape(S, T) for f in range(3)])
    env = np.clip(env, 0.0, P.K)
    hint = np.array([[sol[0] for sol in best.sols], [sol[1] for sol in best.sols]])
    final = _materialise(P, env, best.delta, hint=hint)
    if cfg.solver_mode is SolverMode.ALTERNATING:
        final = _consumer_check(P, final)

    model = KernelEnvelopeModel(
        coefs[0][0], coefs[1][0], coefs[2][0],
        coefs[0][1].reshape(S, T), coefs[1][1].reshape(S, T), coefs[2][1].reshape(S, T),
        cfg.hyper.gammas, anchors, scaler,
    )
    per_day = []
    for s in range(S):
        up, dn, shed, kappa, dp, dm = final.sols[s]
        attrs = DemandAttributes(final.d_bl, env[0, s], env[1, s], env[2, s])
        per_day.append(_solution(prices[s], costs[s], attrs, train[s].gen_hat, up, dn, shed, dp, dm, kappa))
    kkt = max(kkt_residual(sol, prices[s], costs[s],
                           DemandAttributes(final.d_bl, env[0, s], env[1, s], env[2, s]))
              for s, sol in enumerate(per_day))
    d_bl = final.d_bl.copy()
    d_bl.setflags(write=False)
    env.setflags(write=False)
    if not converged:
        log.warning("fit stopped before convergence (%s mode)", cfg.solver_mode.value)
    return FitResult(d_bl, model, per_day, final.loss, float(kkt), iterations, env, P.omega,
                     cfg.solver_mode, bool(converged), float(min(lower, final.loss)), nodes)


def reconstruction_loss(result: FitResult, train: Sequence[DaySample], weights=None) -> float:
    """Weighted squared error between reconstructed and observed net demand."""
    w = result.weights if weights is None else np.asarray(weights, dtype=float)
    if len(train) != result.S or w.shape[0] != result.S:
        raise ValueError("train and weights must match the fitted days")
    total = 0.0
    for s, (day, sol) in enumerate(zip(train, result.per_day)):
        r = result.d_bl + sol.d_sf + sol.d_sd - day.gen_hat - day.demand_hat
        total += w[s] * float(r @ r)
    return total


@dataclass(frozen=True)
class FitReport:
    kkt_residuals: np.ndarray
    feasible: np.ndarray
    envelope_violation: float
    optimality_gap: np.ndarray
    passed: bool

    def summary(self) -> str:
        return (f"max KKT residual {self.kkt_residuals.max(initial=0.0):.3e}, "
                f"infeasible days {int((~self.feasible).sum())}, "
                f"envelope violation {self.envelope_violation:.3e}, "
                f"max consumer optimality gap {self.optimality_gap.max(initial=0.0):.3e}")


def verify_fit(result: FitResult, prices, costs, bounds, t_max: int, tol_kkt: float = 1e-8) -> FitReport:
    """Re-check a fit: KKT residuals, decision feasibility, envelope bounds.

    ``optimality_gap`` compares each day's decision with the global optimum of
    the consumer problem at the fitted envelopes.  Exact mode certifies
    optimality for the chosen binaries; the gap is reported separately.
    """
    S = result.S
    res, feas, gap = np.zeros(S), np.zeros(S, dtype=bool), np.zeros(S)
    env_viol = 0.0
    for s, sol in enumerate(result.per_day):
        env = result.envelopes[:, s]
        attrs = DemandAttributes(result.d_bl, env[0], env[1], env[2])
        res[s] = kkt_residual(sol, prices[s], costs[s], attrs)
        feas[s] = sol.theta.is_feasible(attrs, t_max)
        K = bounds[s].as_array()
        env_viol = max(env_viol, float(np.max(env - K, initial=0.0)), float(np.max(-env, initial=0.0)))
        zero = np.zeros(result.T)
        best = solve_fop(prices[s], costs[s], attrs, t_max, zero)
        mine = consumer_utility(sol.theta, prices[s], costs[s], attrs, zero)
        gap[s] = max(best.utility - mine, 0.0)
    passed = bool(res.max(initial=0.0) <= tol_kkt and feas.all() and env_viol <= 1e-9)
    return FitReport(res, feas, env_viol, gap, passed)
