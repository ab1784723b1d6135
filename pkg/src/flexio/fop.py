"""Exact solver for the consumer's flexibility problem.

For fixed shift binaries the problem is a separable concave QP with a single
energy-neutrality equality.  Every hour's response is a clipped affine function
of the equality multiplier ``kappa``; the net shift ``g(kappa)`` is monotone and
piecewise linear, so its zero set is located exactly by searching the sorted
breakpoints.  The binaries are handled by branch-and-bound whose node bounds
come from dualising the neutrality equality; the resulting bound equals the
convex-hull relaxation of every hour's mixed-binary set.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from .model import (
    ComfortCosts,
    DemandAttributes,
    FlexDecision,
    PriceSignal,
    _vec,
    consumer_utility,
)

__all__ = [
    "KktCertificate",
    "FopSolution",
    "solve_shed",
    "solve_shift_given_binaries",
    "solve_fop",
    "kkt_residual",
    "make_certificate",
]


@dataclass(frozen=True)
class KktCertificate:
    kappa: float
    mu_plus: np.ndarray
    mu_minus: np.ndarray
    mu_zero: np.ndarray
    nu_plus: np.ndarray
    nu_minus: np.ndarray
    nu_zero: np.ndarray


@dataclass(frozen=True)
class FopSolution:
    theta: FlexDecision
    certificate: KktCertificate
    utility: float
    d_sf: np.ndarray
    d_sd: np.ndarray
    nodes: int = 0


def _marginals(prices: PriceSignal):
    """Constant parts of the three stationarity rows."""
    return prices.p_sf_plus - prices.p, prices.p_sf_minus + prices.p, prices.p_sd + prices.p


def solve_shed(prices: PriceSignal, costs: ComfortCosts, env_sd) -> np.ndarray:
    """Hour-by-hour optimal shed amount; bang-bang where the comfort cost is zero."""
    env = _vec(env_sd, "env_sd", prices.T)
    if np.any(env < 0):
        raise ValueError("env_sd must be nonnegative")
    a = prices.p_sd + prices.p
    c = costs.c_sd
    with np.errstate(divide="ignore", invalid="ignore"):
        interior = np.clip(a / (2 * c), 0.0, env)
    return np.where(c > 0, interior, np.where(a > 0, env, 0.0))


def _response(kappa, a, c, U, sign, side):
    """Clipped response of one shift direction at multiplier ``kappa``.

    ``side`` picks how zero-cost hours sitting exactly on their threshold are
    treated: 'value' (inactive), 'left' or 'right' (one-sided limits in kappa).
    """
    m = a + sign * kappa
    with np.errstate(divide="ignore", invalid="ignore"):
        smooth = np.clip(m / (2 * c), 0.0, U)
    if side == "value":
        on = m > 0
    elif (side == "right") == (sign > 0):
        on = m >= 0
    else:
        on = m > 0
    return np.where(c > 0, smooth, np.where(on, U, 0.0))


def _gap(kappa, up, dn, side):
    """Net shift at one multiplier, or at a column of multipliers."""
    return _response(kappa, *up, +1, side).sum(-1) - _response(kappa, *dn, -1, side).sum(-1)


def _breakpoints(up, dn) -> np.ndarray:
    a_u, c_u, U_u = up
    a_d, c_d, U_d = dn
    act_u, act_d = U_u > 0, U_d > 0
    pts = [-a_u[act_u], (-a_u + 2 * c_u * U_u)[act_u & (c_u > 0)],
           a_d[act_d], (a_d - 2 * c_d * U_d)[act_d & (c_d > 0)]]
    return np.unique(np.concatenate(pts))


def _kappa_interval(up, dn, tol):
    """Closed interval of multipliers at which the net shift can be zero."""
    b = _breakpoints(up, dn)
    if b.size == 0:
        return -np.inf, np.inf
    GL = _gap(b[:, None], up, dn, "left")
    GR = _gap(b[:, None], up, dn, "right")
    m = b.size

    if GL[0] >= -tol:
        lo = -np.inf
    else:
        i = int(np.argmax(GR >= -tol))
        if i == 0:
            lo = b[0]
        elif GL[i] >= -tol and GL[i] > GR[i - 1]:
            lo = b[i - 1] + (-GR[i - 1]) / (GL[i] - GR[i - 1]) * (b[i] - b[i - 1])
            lo = min(max(lo, b[i - 1]), b[i])
        else:
            lo = b[i]

    if GR[-1] <= tol:
        hi = np.inf
    else:
        i = m - 1 - int(np.argmax((GL <= tol)[::-1]))
        if i == m - 1:
            hi = b[-1]
        elif GR[i] <= tol and GL[i + 1] > GR[i]:
            hi = b[i] + (-GR[i]) / (GL[i + 1] - GR[i]) * (b[i + 1] - b[i])
            hi = min(max(hi, b[i]), b[i + 1])
        else:
            hi = b[i]
    return lo, max(lo, hi)


def _fill(amount, cap, weights):
    """Spread ``amount`` over hours proportionally to ``weights``, capped at ``cap``."""
    out = np.zeros_like(cap)
    if amount <= 0 or cap.sum() <= 0:
        return out
    if amount >= cap.sum():
        return cap.copy()
    w = np.where(cap > 0, np.maximum(weights, 0.0), 0.0)
    if w.sum() <= 0:
        w = cap.copy()
    free = cap > 0
    remaining = amount
    while remaining > 0 and free.any():
        share = remaining * w * free / (w * free).sum()
        over = free & (out + share >= cap)
        if not over.any():
            out = out + share
            break
        remaining -= (cap - out)[over].sum()
        out[over] = cap[over]
        free &= ~over
        if not (w * free).any():
            w = np.where(free, cap, 0.0)
    return out


def solve_shift_given_binaries(prices: PriceSignal, costs: ComfortCosts, env_plus, env_minus,
                               delta_plus, delta_minus, tie_hint: Optional[tuple] = None):
    """Exact maximiser of the shifting subproblem for fixed shift binaries.

    Returns ``(d_sf_plus, d_sf_minus, kappa)``.  When the multiplier interval is
    nondegenerate its midpoint is reported (the point nearest zero if the
    interval is unbounded).  Zero-cost hours that end up exactly indifferent
    share the balancing energy in proportion to ``tie_hint`` (a pair of
    vectors), or to their envelopes when no hint is given.
    """
    T = prices.T
    env_p = _vec(env_plus, "env_plus", T)
    env_m = _vec(env_minus, "env_minus", T)
    dp = np.asarray(delta_plus, dtype=int).reshape(-1)
    dm = np.asarray(delta_minus, dtype=int).reshape(-1)
    if dp.shape[0] != T or dm.shape[0] != T:
        raise ValueError("binaries must have length T")
    if np.any((dp != 0) & (dp != 1)) or np.any((dm != 0) & (dm != 1)) or np.any(dp + dm > 1):
        raise ValueError("infeasible binaries: each hour may shift in at most one direction")
    if np.any(env_p < 0) or np.any(env_m < 0):
        raise ValueError("envelopes must be nonnegative")

    a_u, a_d, _ = _marginals(prices)
    up = (a_u, costs.c_sf_plus, env_p * dp)
    dn = (a_d, costs.c_sf_minus, env_m * dm)
    tol = 1e-12 * (1.0 + up[2].sum() + dn[2].sum())

    lo, hi = _kappa_interval(up, dn, tol)
    if np.isfinite(lo) and np.isfinite(hi):
        kappa = lo if hi == lo else 0.5 * (lo + hi)
    else:
        kappa = float(np.clip(0.0, lo, hi))

    d_up = _response(kappa, *up, +1, "value")
    d_dn = _response(kappa, *dn, -1, "value")
    eps = 1e-12 * (1.0 + abs(kappa))
    tied_up = (up[1] == 0) & (up[2] > 0) & (np.abs(a_u + kappa) <= eps)
    tied_dn = (dn[1] == 0) & (dn[2] > 0) & (np.abs(a_d - kappa) <= eps)
    d_up[tied_up] = 0.0
    d_dn[tied_dn] = 0.0
    gap = d_up.sum() - d_dn.sum()
    hint_up, hint_dn = tie_hint if tie_hint is not None else (up[2], dn[2])
    if gap < 0:
        d_up[tied_up] = _fill(-gap, up[2][tied_up], np.asarray(hint_up, float)[tied_up])
    elif gap > 0:
        d_dn[tied_dn] = _fill(gap, dn[2][tied_dn], np.asarray(hint_dn, float)[tied_dn])
    return d_up, d_dn, float(kappa)


def _shift_value(prices, costs, d_up, d_dn) -> float:
    a_u, a_d, _ = _marginals(prices)
    return float(np.sum(a_u * d_up - costs.c_sf_plus * d_up**2 + a_d * d_dn - costs.c_sf_minus * d_dn**2))


def make_certificate(prices: PriceSignal, costs: ComfortCosts, theta: FlexDecision, kappa: float) -> KktCertificate:
    """Duals that close the stationarity rows given the primal point and ``kappa``."""
    a_u, a_d, a_0 = _marginals(prices)
    r_u = a_u + kappa - 2 * costs.c_sf_plus * theta.d_sf_plus
    r_d = a_d - kappa - 2 * costs.c_sf_minus * theta.d_sf_minus
    r_0 = a_0 - 2 * costs.c_sd * theta.d_sd_minus
    pos, neg = (lambda r: np.maximum(r, 0.0)), (lambda r: np.maximum(-r, 0.0))
    return KktCertificate(float(kappa), pos(r_u), pos(r_d), pos(r_0), neg(r_u), neg(r_d), neg(r_0))


def _solution(prices, costs, attrs, gen, d_up, d_dn, d_shed, dp, dm, kappa, nodes=0) -> FopSolution:
    theta = FlexDecision(d_up, d_dn, d_shed, dp, dm)
    cert = make_certificate(prices, costs, theta, kappa)
    util = consumer_utility(theta, prices, costs, attrs, gen)
    d_sf = theta.d_sf_plus - theta.d_sf_minus
    d_sd = attrs.env_sd - theta.d_sd_minus
    for arr in (d_sf, d_sd):
        arr.setflags(write=False)
    return FopSolution(theta, cert, util, d_sf, d_sd, nodes)


class _ShiftBnB:
    """Branch-and-bound over (delta_plus, delta_minus) for fixed envelopes.

    The search is split by the number of hours ``k`` allowed to shift up
    (the remaining ``t_max - k`` may shift down), most promising split first.
    Node bounds dualise energy neutrality with ``kappa``: for a fixed
    multiplier every (hour, direction) pair is worth
    ``phi(kappa) = max_{0<=d<=env} (a +- kappa) d - c d**2`` and each side keeps
    its best admissible pairs.  Mutual exclusion is left to branching.  The
    bound ``h(kappa)`` is convex and valid at every ``kappa``, so an
    approximate grid minimisation never cuts off the optimum.

    Pairs with identical price and cost are interchangeable up to their
    envelope.  If a pair is excluded at an hour that is otherwise unused, every
    pair of the same class with a smaller envelope is excluded too; some
    optimal solution always survives this rule.
    """

    grid = 33
    rounds = 12

    def __init__(self, prices, costs, env_p, env_m, t_max, max_nodes=200_000):
        self.prices, self.costs = prices, costs
        self.env_p, self.env_m = env_p, env_m
        self.t_max = t_max
        self.max_nodes = max_nodes
        self.T = T = prices.T
        a_u, a_d, _ = _marginals(prices)
        self.a = np.concatenate([a_u, a_d])
        self.c = np.concatenate([costs.c_sf_plus, costs.c_sf_minus])
        self.e = np.concatenate([env_p, env_m])
        self.sign = np.concatenate([np.ones(T), -np.ones(T)])
        self.eligible = self.e > 0
        self.quad = self.c > 0
        self.c_safe = np.where(self.quad, self.c, 1.0)
        self.dominated = self._dominance()
        ends = np.concatenate([-a_u[env_p > 0], a_d[env_m > 0], [0.0]])
        self.k_lo, self.k_hi = float(ends.min()) - 1.0, float(ends.max()) + 1.0

    def _dominance(self):
        """For every pair, the later pairs of its class (smaller envelopes)."""
        out = [np.zeros(0, int)] * (2 * self.T)
        keys = {}
        for j in np.flatnonzero(self.eligible):
            keys.setdefault((j < self.T, self.a[j], self.c[j]), []).append(j)
        for members in keys.values():
            order = sorted(members, key=lambda j: (-self.e[j], j))
            for i, j in enumerate(order):
                out[j] = np.array(order[i + 1:], dtype=int)
        return out

    def _propagate(self, fix, caps):
        """Apply exclusion, side caps and dominance; None if the node is empty."""
        T = self.T
        changed = True
        while changed:
            changed = False
            on = fix == 1
            if np.any(on[:T] & on[T:]):
                return None
            for side, cap in zip((slice(0, T), slice(T, 2 * T)), caps):
                n_on = int(on[side].sum())
                if n_on > cap:
                    return None
                part = fix[side]
                if n_on == cap and np.any(part < 0):
                    part[part < 0] = 0
                    changed = True
            for j in np.flatnonzero(on):
                other = j + T if j < T else j - T
                if fix[other] != 0:
                    fix[other] = 0
                    changed = True
            idle = np.flatnonzero((fix[:T] == 0) & (fix[T:] == 0))
            for t in idle:
                for j in (t, t + T):
                    dom = self.dominated[j]
                    if dom.size == 0:
                        continue
                    if np.any(fix[dom] == 1):
                        return None
                    if np.any(fix[dom] < 0):
                        fix[dom] = 0
                        changed = True
        return fix

    def _phi(self, kappa):
        """Value of every pair at a column of multipliers, shape (m, 2T)."""
        m = self.a + self.sign * kappa[:, None]
        x = np.where(self.quad, np.clip(m / (2 * self.c_safe), 0.0, self.e), np.where(m > 0, self.e, 0.0))
        return m * x - self.c * x**2

    def _select(self, phi, fix, caps):
        """Lagrangian value and chosen pairs (boolean, shape (m, 2T))."""
        T = self.T
        forced = fix == 1
        value = np.where(forced, phi, 0.0).sum(1)
        chosen = np.repeat(forced[None, :], phi.shape[0], axis=0)
        for side, cap in zip((slice(0, T), slice(T, 2 * T)), caps):
            r = cap - int(forced[side].sum())
            v = np.where(fix[side] < 0, np.maximum(phi[:, side], 0.0), 0.0)
            if r <= 0 or not np.any(v > 0):
                continue
            order = np.argsort(-v, axis=1, kind="stable")[:, :r]
            top = np.take_along_axis(v, order, axis=1)
            value = value + top.sum(1)
            pick = np.zeros_like(v, dtype=bool)
            np.put_along_axis(pick, order, top > 0, axis=1)
            chosen[:, side] |= pick
        return value, chosen

    def _select_joint(self, phi, fix, caps):
        """Companion bound: exclusion enforced per hour, only the total capped."""
        T = self.T
        forced = fix == 1
        free_hours = ~(forced[:T] | forced[T:])
        v = np.where(fix < 0, np.maximum(phi, 0.0), 0.0)
        v_up, v_dn = v[:, :T], v[:, T:]
        best = np.where(free_hours, np.maximum(v_up, v_dn), 0.0)
        r = self.t_max - int(forced.sum())
        keep = np.zeros_like(best, dtype=bool)
        if r > 0:
            order = np.argsort(-best, axis=1, kind="stable")[:, :r]
            np.put_along_axis(keep, order, True, axis=1)
        keep &= best > 0
        pick_up = keep & (v_up >= v_dn)
        pick_dn = keep & ~pick_up
        value = np.where(forced, phi, 0.0).sum(1) + np.where(keep, best, 0.0).sum(1)
        chosen = np.concatenate([pick_up, pick_dn], axis=1) | forced
        return value, chosen

    def _minimise(self, select, fix, caps):
        lo, hi = self.k_lo, self.k_hi
        for _ in range(self.rounds):
            K = np.linspace(lo, hi, self.grid)
            h, _ = select(self._phi(K), fix, caps)
            i = int(np.argmin(h))
            lo, hi = K[max(i - 1, 0)], K[min(i + 1, self.grid - 1)]
            if hi - lo <= 1e-10 * (1.0 + abs(K[i])):
                break
        K = np.array([lo, K[i], hi])
        h, chosen = select(self._phi(K), fix, caps)
        return float(h[1]), K[1], chosen[0], chosen[2]

    def bound(self, fix, caps):
        best = self._minimise(self._select, fix, caps)
        if best[0] > 0:
            joint = self._minimise(self._select_joint, fix, caps)
            if joint[0] < best[0]:
                best = joint
        return best

    def evaluate(self, chosen, phi):
        """Exact value of a selection, dropping the weaker side of any clash."""
        T = self.T
        dp, dm = chosen[:T].copy(), chosen[T:].copy()
        clash = dp & dm
        dp[clash] = phi[:T][clash] >= phi[T:][clash]
        dm[clash] = ~dp[clash]
        dp, dm = dp.astype(int), dm.astype(int)
        d_up, d_dn, kappa = solve_shift_given_binaries(self.prices, self.costs, self.env_p, self.env_m, dp, dm)
        return _shift_value(self.prices, self.costs, d_up, d_dn), (d_up, d_dn, kappa, dp, dm)

    def solve(self):
        T = self.T
        zero = np.zeros(2 * T, dtype=bool)
        best_val, best = self.evaluate(zero, np.zeros(2 * T))
        if self.t_max == 0 or not self.eligible[:T].any() or not self.eligible[T:].any():
            return best, 0
        splits = []
        active = int(np.sum(self.eligible[:T] | self.eligible[T:]))
        ks = range(1, self.t_max) if self.t_max < active else [self.t_max]
        for k in ks:
            caps = (k, self.t_max - k) if k < self.t_max else (k, k)
            fix = self._propagate(np.where(self.eligible, -1, 0), caps)
            if fix is not None:
                splits.append((self.bound(fix, caps)[0], k, caps, fix))
        splits.sort(key=lambda s: (-s[0], s[1]))
        seen = set()
        nodes = 0
        for root_bound, _, caps, root in splits:
            if root_bound <= best_val + 1e-9 * (1.0 + abs(best_val)):
                break
            stack = [root]
            while stack and nodes < self.max_nodes:
                fix = self._propagate(stack.pop(), caps)
                if fix is None:
                    continue
                nodes += 1
                bound, kappa, left, right = self.bound(fix, caps)
                tol = 1e-9 * (1.0 + abs(best_val))
                if bound <= best_val + tol:
                    continue
                phi = self._phi(np.array([kappa]))[0]
                for chosen in (left, right):
                    key = chosen.tobytes()
                    if key in seen:
                        continue
                    seen.add(key)
                    val, sol = self.evaluate(chosen, phi)
                    if val > best_val + 1e-12 * (1.0 + abs(best_val)):
                        best_val, best = val, sol
                if bound <= best_val + tol:
                    continue
                clash = np.flatnonzero((left[:T] & left[T:]) | (right[:T] & right[T:]))
                if clash.size:
                    t = int(clash[np.argmax(np.minimum(phi[clash], phi[clash + T]))])
                    a, b = fix.copy(), fix.copy()
                    a[t], b[t + T] = 0, 0
                    stack.extend([a, b])
                    continue
                free = np.flatnonzero(fix < 0)
                split = free[left[free] != right[free]]
                if split.size == 0:
                    split = free[left[free]]
                if split.size == 0:
                    continue
                j = int(split[np.argmax(phi[split])])
                out, into = fix.copy(), fix.copy()
                out[j], into[j] = 0, 1
                stack.extend([out, into])
        return best, nodes


def solve_fop(prices: PriceSignal, costs: ComfortCosts, attrs: DemandAttributes, t_max: int, gen) -> FopSolution:
    """Globally optimal consumer decision for one day.

    Shedding decouples hour by hour; shifting is solved by branch-and-bound
    over the shift binaries.  Ties in utility resolve to the least flexible
    decision, so a day without any price spread never shifts.
    """
    T = prices.T
    for name, v in (("costs", costs), ("attrs", attrs)):
        if v.T != T:
            raise ValueError(f"{name} has horizon {v.T}, expected {T}")
    gen = _vec(gen, "gen", T)
    if not 0 <= int(t_max) <= T:
        raise ValueError(f"t_max must lie in [0, {T}], got {t_max}")
    d_shed = solve_shed(prices, costs, attrs.env_sd)
    bnb = _ShiftBnB(prices, costs, attrs.env_sf_plus, attrs.env_sf_minus, int(t_max))
    (d_up, d_dn, kappa, dp, dm), nodes = bnb.solve()
    return _solution(prices, costs, attrs, gen, d_up, d_dn, d_shed, dp, dm, kappa, nodes)


def kkt_residual(solution: FopSolution, prices: PriceSignal, costs: ComfortCosts, attrs: DemandAttributes) -> float:
    """Largest violation among stationarity, complementarity and sign conditions."""
    th, c = solution.theta, solution.certificate
    a_u, a_d, a_0 = _marginals(prices)
    U_p = attrs.env_sf_plus * th.delta_plus
    U_m = attrs.env_sf_minus * th.delta_minus
    rows = [
        -2 * costs.c_sf_plus * th.d_sf_plus + a_u + c.kappa - c.mu_plus + c.nu_plus,
        -2 * costs.c_sf_minus * th.d_sf_minus + a_d - c.kappa - c.mu_minus + c.nu_minus,
        -2 * costs.c_sd * th.d_sd_minus + a_0 - c.mu_zero + c.nu_zero,
        c.mu_plus * (U_p - th.d_sf_plus),
        c.mu_minus * (U_m - th.d_sf_minus),
        c.mu_zero * (attrs.env_sd - th.d_sd_minus),
        c.nu_plus * th.d_sf_plus,
        c.nu_minus * th.d_sf_minus,
        c.nu_zero * th.d_sd_minus,
    ]
    sign = [np.minimum(v, 0.0) for v in (c.mu_plus, c.mu_minus, c.mu_zero, c.nu_plus, c.nu_minus, c.nu_zero)]
    primal = [
        np.maximum(th.d_sf_plus - U_p, 0.0),
        np.maximum(th.d_sf_minus - U_m, 0.0),
        np.maximum(th.d_sd_minus - attrs.env_sd, 0.0),
        np.array([th.d_sf_plus.sum() - th.d_sf_minus.sum()]),
    ]
    return float(max(np.max(np.abs(v), initial=0.0) for v in rows + sign + primal))
