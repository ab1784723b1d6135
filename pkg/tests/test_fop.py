import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexio.fop import kkt_residual, make_certificate, solve_fop, solve_shed, solve_shift_given_binaries
from flexio.model import (
    ComfortCosts,
    DemandAttributes,
    FlexDecision,
    PriceSignal,
    build_comfort_costs,
    build_tou_prices,
    consumer_utility,
)
from flexio.fop import FopSolution, _solution

from oracles import brute_force_utility


def _shed_case(p_sd, p, c_sd, env):
    prices = PriceSignal([p], [0.0], [0.0], [p_sd])
    costs = ComfortCosts([0.0], [0.0], [c_sd])
    return solve_shed(prices, costs, [env])[0]


def _grid_argmax(f, hi, n=200_001):
    x = np.linspace(0.0, hi, n)
    return x[np.argmax(f(x))]


def test_shed_saturates_envelope():
    assert _shed_case(4.0, 10.0, 2.0, 1.0) == pytest.approx(1.0)
    assert _grid_argmax(lambda x: 14 * x - 2 * x**2, 1.0) == pytest.approx(1.0)


def test_shed_interior_optimum():
    assert _shed_case(4.0, 10.0, 10.0, 1.0) == pytest.approx(0.7)
    assert _grid_argmax(lambda x: 14 * x - 10 * x**2, 1.0) == pytest.approx(0.7, abs=1e-5)


def test_shed_empty_envelope():
    assert _shed_case(4.0, 10.0, 2.0, 0.0) == 0.0


def test_shed_bang_bang_without_cost():
    assert _shed_case(1.0, 0.0, 0.0, 2.0) == 2.0
    assert _shed_case(0.0, 0.0, 0.0, 2.0) == 0.0


def _two_hour_case():
    prices = PriceSignal([10.0, 2.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0])
    costs = ComfortCosts([1.0, 1.0], [1.0, 1.0], [1.0, 1.0])
    return prices, costs


def test_shift_given_binaries_two_hours():
    prices, costs = _two_hour_case()
    up, dn, kappa = solve_shift_given_binaries(prices, costs, [1.0, 1.0], [1.0, 1.0], [0, 1], [1, 0])
    np.testing.assert_allclose(up, [0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(dn, [1.0, 0.0], atol=1e-12)
    # 8x - 2x^2 on [0, 1] peaks at the bound
    assert _grid_argmax(lambda x: 8 * x - 2 * x**2, 1.0) == pytest.approx(1.0)


def test_shift_given_binaries_zero_envelopes():
    prices, costs = _two_hour_case()
    up, dn, kappa = solve_shift_given_binaries(prices, costs, [0.0, 0.0], [0.0, 0.0], [0, 1], [1, 0])
    assert np.all(up == 0) and np.all(dn == 0)
    assert kappa == 0.0


def test_shift_given_binaries_no_spread():
    prices = PriceSignal([5.0] * 3, [0.0] * 3, [0.0] * 3, [0.0] * 3)
    costs = ComfortCosts([1.0] * 3, [1.0] * 3, [1.0] * 3)
    up, dn, _ = solve_shift_given_binaries(prices, costs, [1.0] * 3, [1.0] * 3, [1, 0, 0], [0, 1, 0])
    assert np.all(up == 0) and np.all(dn == 0)


def test_shift_given_binaries_rejects_clash():
    prices, costs = _two_hour_case()
    with pytest.raises(ValueError):
        solve_shift_given_binaries(prices, costs, [1.0, 1.0], [1.0, 1.0], [1, 0], [1, 0])


def test_fop_zero_envelopes():
    prices, costs = _two_hour_case()
    attrs = DemandAttributes([1.0, 2.0], [0, 0], [0, 0], [0, 0])
    gen = np.array([0.5, 0.0])
    sol = solve_fop(prices, costs, attrs, 2, gen)
    assert np.all(sol.theta.d_sf_plus == 0) and np.all(sol.theta.d_sd_minus == 0)
    assert sol.utility == pytest.approx(-np.sum(prices.p * (attrs.d_bl - gen)))


def test_fop_two_hour_gain():
    prices, costs = _two_hour_case()
    attrs = DemandAttributes([0.0, 0.0], [1.0, 1.0], [1.0, 1.0], [0.0, 0.0])
    sol = solve_fop(prices, costs, attrs, 2, [0.0, 0.0])
    no_shift = consumer_utility(FlexDecision.zeros(2), prices, costs, attrs, [0.0, 0.0])
    assert sol.utility - no_shift == pytest.approx(6.0, abs=1e-9)
    assert sol.utility == pytest.approx(brute_force_utility(prices, costs, attrs, 2, np.zeros(2)), abs=1e-9)


def test_fop_t_max_zero_only_sheds():
    prices, costs = _two_hour_case()
    prices = PriceSignal(prices.p, prices.p_sf_plus, prices.p_sf_minus, [3.0, 3.0])
    attrs = DemandAttributes([0.0, 0.0], [1.0, 1.0], [1.0, 1.0], [1.0, 1.0])
    sol = solve_fop(prices, costs, attrs, 0, [0.0, 0.0])
    assert np.all(sol.theta.delta_plus == 0) and np.all(sol.theta.delta_minus == 0)
    assert np.all(sol.theta.d_sd_minus > 0)


def test_fop_rejects_bad_t_max():
    prices, costs = _two_hour_case()
    attrs = DemandAttributes([0.0, 0.0], [1.0, 1.0], [1.0, 1.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        solve_fop(prices, costs, attrs, 3, [0.0, 0.0])
    with pytest.raises(ValueError):
        solve_fop(prices, costs, attrs, 1, [0.0, np.inf])


def test_fop_flat_tariff_never_shifts():
    tou = np.full(6, 22.0)
    prices = build_tou_prices(22.0, tou)
    costs = build_comfort_costs(prices, 22.0, tou)
    attrs = DemandAttributes(np.ones(6), np.ones(6), np.ones(6), np.ones(6))
    sol = solve_fop(prices, costs, attrs, 6, np.zeros(6))
    assert np.all(sol.d_sf == 0)


def test_kkt_residual_zero_without_incentives():
    prices = PriceSignal([5.0, 5.0], [0, 0], [0, 0], [0, 0])
    costs = ComfortCosts([1.0, 1.0], [1.0, 1.0], [1.0, 1.0])
    attrs = DemandAttributes([1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [1.0, 1.0])
    theta = FlexDecision.zeros(2)
    sol = _solution(prices, costs, attrs, np.zeros(2), theta.d_sf_plus, theta.d_sf_minus,
                    np.zeros(2), theta.delta_plus, theta.delta_minus, 0.0)
    # d_sd_minus = 0 is not optimal here (p > 0), so residual comes from the shed row only
    shed_row = 5.0
    assert kkt_residual(sol, prices, costs, attrs) == pytest.approx(shed_row)
    best = solve_fop(prices, costs, attrs, 2, np.zeros(2))
    assert kkt_residual(best, prices, costs, attrs) <= 1e-12


def test_kkt_residual_detects_perturbation():
    prices, costs = _two_hour_case()
    costs = ComfortCosts([1.0, 1.0], [1.0, 1.0], [1.0, 1.0])
    attrs = DemandAttributes([0.0, 0.0], [5.0, 5.0], [5.0, 5.0], [0.0, 0.0])
    sol = solve_fop(prices, costs, attrs, 2, [0.0, 0.0])
    assert kkt_residual(sol, prices, costs, attrs) <= 1e-8
    up = sol.theta.d_sf_plus.copy()
    t = int(np.argmax(up))
    assert 0 < up[t] < 5.0  # interior coordinate
    up[t] += 0.1
    th = sol.theta
    bumped = FlexDecision(up, th.d_sf_minus, th.d_sd_minus, th.delta_plus, th.delta_minus)
    cert = sol.certificate
    broken = FopSolution(bumped, cert, sol.utility, sol.d_sf, sol.d_sd)
    assert kkt_residual(broken, prices, costs, attrs) >= 0.1 * 2 * costs.c_sf_plus[t] - 1e-12


def _random_instance(rng, T):
    prices = PriceSignal(rng.uniform(5, 30, T), rng.uniform(0, 8, T) * rng.integers(0, 2, T),
                         rng.uniform(0, 8, T) * rng.integers(0, 2, T), rng.uniform(0, 5, T))
    zero = rng.integers(0, 2, (3, T))
    costs = ComfortCosts(*(rng.uniform(0, 6, (3, T)) * zero))
    attrs = DemandAttributes(rng.uniform(0, 2, T), *rng.uniform(0, 2, (3, T)))
    return prices, costs, attrs


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 4))
def test_fop_matches_enumeration(seed, T):
    rng = np.random.default_rng(seed)
    prices, costs, attrs = _random_instance(rng, T)
    t_max = int(rng.integers(0, T + 1))
    gen = rng.uniform(0, 1, T)
    sol = solve_fop(prices, costs, attrs, t_max, gen)
    assert sol.utility == pytest.approx(brute_force_utility(prices, costs, attrs, t_max, gen), abs=1e-6)
    assert sol.theta.is_feasible(attrs, t_max)
    assert abs(sol.theta.d_sf_plus.sum() - sol.theta.d_sf_minus.sum()) <= 1e-9
    assert kkt_residual(sol, prices, costs, attrs) <= 1e-8
    np.testing.assert_array_equal(sol.d_sf, sol.theta.d_sf_plus - sol.theta.d_sf_minus)
    np.testing.assert_array_equal(sol.d_sd, attrs.env_sd - sol.theta.d_sd_minus)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_fop_monotone_in_envelopes(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(2, 7))
    prices, costs, attrs = _random_instance(rng, T)
    t_max = int(rng.integers(0, T + 1))
    bigger = DemandAttributes(attrs.d_bl, attrs.env_sf_plus + rng.uniform(0, 1, T) * rng.integers(0, 2, T),
                              attrs.env_sf_minus + rng.uniform(0, 1, T) * rng.integers(0, 2, T),
                              attrs.env_sd + rng.uniform(0, 1, T) * rng.integers(0, 2, T))
    gen = np.zeros(T)
    small = solve_fop(prices, costs, attrs, t_max, gen)
    large = solve_fop(prices, costs, bigger, t_max, gen)
    # the extra sheddable demand is paid for at p, compare flexibility value only
    extra = -float(np.sum(prices.p * (bigger.env_sd - attrs.env_sd)))
    assert large.utility - extra >= small.utility - 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_certificate_signs(seed):
    rng = np.random.default_rng(seed)
    prices, costs, attrs = _random_instance(rng, 5)
    sol = solve_fop(prices, costs, attrs, 3, np.zeros(5))
    c = sol.certificate
    for v in (c.mu_plus, c.mu_minus, c.mu_zero, c.nu_plus, c.nu_minus, c.nu_zero):
        assert np.all(v >= 0)
    again = make_certificate(prices, costs, sol.theta, c.kappa)
    np.testing.assert_array_equal(again.mu_plus, c.mu_plus)
