import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexio.model import (
    ComfortCosts,
    DemandAttributes,
    FlexBounds,
    FlexDecision,
    Hyperparams,
    PriceSignal,
    build_comfort_costs,
    build_tou_prices,
    compute_weights,
    consumer_utility,
    utility_terms,
)


def _one_hour(p=10.0, p_sf_plus=0.0, p_sf_minus=0.0, p_sd=0.0, c_sd=0.0):
    prices = PriceSignal([p], [p_sf_plus], [p_sf_minus], [p_sd])
    costs = ComfortCosts([0.0], [0.0], [c_sd])
    return prices, costs


def test_utility_no_flex_pays_for_baseload_and_sheddable():
    prices, costs = _one_hour()
    attrs = DemandAttributes([2.0], [0.0], [0.0], [1.0])
    assert consumer_utility(FlexDecision.zeros(1), prices, costs, attrs, [0.0]) == pytest.approx(-30.0)


def test_utility_zero_net_position():
    prices, costs = _one_hour()
    attrs = DemandAttributes([1.5], [0.0], [0.0], [0.0])
    assert consumer_utility(FlexDecision.zeros(1), prices, costs, attrs, [1.5]) == 0.0


def test_utility_shedding_hand_value():
    prices, costs = _one_hour(p=10.0, p_sd=4.0, c_sd=2.0)
    attrs = DemandAttributes([0.0], [0.0], [0.0], [1.0])
    theta = FlexDecision([0.0], [0.0], [0.5], [0], [0])
    Q, L = utility_terms(theta, prices, costs, attrs, [0.0])
    assert Q[0] == pytest.approx(-0.5)
    assert L[0] == pytest.approx(-3.0)
    assert consumer_utility(theta, prices, costs, attrs, [0.0]) == pytest.approx(-3.5)


def test_utility_rejects_mismatched_horizon():
    prices, costs = _one_hour()
    attrs = DemandAttributes([1.0, 1.0], [0, 0], [0, 0], [0, 0])
    with pytest.raises(ValueError):
        consumer_utility(FlexDecision.zeros(1), prices, costs, attrs, [0.0])


@pytest.mark.parametrize("alpha,S,expected", [
    (0.0, 4, [0.25, 0.25, 0.25, 0.25]),
    (1.0, 2, [1 / 3, 2 / 3]),
    (2.0, 3, [1 / 14, 4 / 14, 9 / 14]),
])
def test_compute_weights_examples(alpha, S, expected):
    np.testing.assert_allclose(compute_weights(alpha, S), expected, rtol=0, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 10.0), st.integers(1, 400))
def test_compute_weights_normalised_and_monotone(alpha, S):
    w = compute_weights(alpha, S)
    assert abs(w.sum() - 1.0) <= 1e-12
    assert np.all(np.diff(w) >= -1e-18)


def test_compute_weights_rejects_negative_alpha():
    with pytest.raises(ValueError):
        compute_weights(-0.1, 3)


def test_tou_prices_japanese_layout():
    tou = np.full(24, 20.0)
    tou[14:22] = 35.0
    prices = build_tou_prices(26.0, tou)
    assert np.all(prices.p_sf_minus[14:22] == 9.0)
    assert np.all(prices.p_sf_plus[:14] == 6.0) and np.all(prices.p_sf_plus[22:] == 6.0)
    np.testing.assert_allclose(prices.p_sd, 4.0)


def test_tou_prices_four_peak_hours():
    tou = np.full(24, 15.0)
    tou[16:20] = 29.0
    prices = build_tou_prices(22.0, tou)
    assert np.all(prices.p_sf_plus[tou == 15.0] == 7.0)
    assert np.all(prices.p_sf_minus[tou == 29.0] == 7.0)
    np.testing.assert_allclose(prices.p_sd, 20 * 7 / 24)


def test_tou_prices_flat_schedule_has_no_incentives():
    prices = build_tou_prices(22.0, np.full(6, 22.0))
    for v in (prices.p_sf_plus, prices.p_sf_minus, prices.p_sd):
        assert np.all(v == 0.0)


def test_tou_prices_rejects_negative_tou():
    with pytest.raises(ValueError):
        build_tou_prices(22.0, [-1.0, 3.0])


@settings(max_examples=100, deadline=None)
@given(st.floats(1.0, 50.0), st.lists(st.floats(0.0, 60.0), min_size=1, max_size=24))
def test_tou_incentives_never_both_positive(flat, tou):
    prices = build_tou_prices(flat, tou)
    assert np.all(prices.p_sf_plus * prices.p_sf_minus == 0.0)


def test_comfort_costs_peak_hour():
    tou = np.array([15.0, 29.0])
    prices = build_tou_prices(22.0, tou)
    costs = build_comfort_costs(prices, 22.0, tou)
    assert costs.c_sf_plus[1] == 7.0 and costs.c_sf_minus[1] == 0.0


def test_comfort_costs_off_peak_hour():
    tou = np.array([20.0, 35.0])
    prices = build_tou_prices(26.0, tou)
    costs = build_comfort_costs(prices, 26.0, tou)
    assert costs.c_sf_plus[0] == 0.0 and costs.c_sf_minus[0] == 6.0
    # shedding cost: mean of the nonzero shift costs (6 and 9)
    np.testing.assert_allclose(costs.c_sd, 7.5)


def test_comfort_costs_flat_tariff_zero():
    tou = np.full(3, 22.0)
    costs = build_comfort_costs(build_tou_prices(22.0, tou), 22.0, tou)
    assert np.all(costs.c_sf_plus == 0) and np.all(costs.c_sf_minus == 0) and np.all(costs.c_sd == 0)


def _random_decision(rng, attrs, T):
    dp = rng.integers(0, 2, T)
    dm = (1 - dp) * rng.integers(0, 2, T)
    up = rng.uniform(0, 1, T) * attrs.env_sf_plus * dp
    dn = rng.uniform(0, 1, T) * attrs.env_sf_minus * dm
    shed = rng.uniform(0, 1, T) * attrs.env_sd
    return dp, dm, up, dn, shed


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_utility_concave_for_fixed_binaries(seed, lam):
    rng = np.random.default_rng(seed)
    T = 5
    prices = PriceSignal(rng.uniform(5, 30, T), rng.uniform(0, 5, T), rng.uniform(0, 5, T), rng.uniform(0, 5, T))
    costs = ComfortCosts(rng.uniform(0, 5, T), rng.uniform(0, 5, T), rng.uniform(0, 5, T))
    attrs = DemandAttributes(rng.uniform(0, 2, T), rng.uniform(0, 2, T), rng.uniform(0, 2, T), rng.uniform(0, 2, T))
    dp, dm, up1, dn1, sh1 = _random_decision(rng, attrs, T)
    _, _, up2, dn2, sh2 = _random_decision(rng, attrs, T)
    up2, dn2 = up2 * dp, dn2 * dm
    gen = rng.uniform(0, 1, T)
    t1 = FlexDecision(up1, dn1, sh1, dp, dm)
    t2 = FlexDecision(up2, dn2, sh2, dp, dm)
    mix = FlexDecision(lam * up1 + (1 - lam) * up2, lam * dn1 + (1 - lam) * dn2, lam * sh1 + (1 - lam) * sh2, dp, dm)
    u = lambda th: consumer_utility(th, prices, costs, attrs, gen)
    assert u(mix) >= lam * u(t1) + (1 - lam) * u(t2) - 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_utility_equals_sum_of_terms(seed):
    rng = np.random.default_rng(seed)
    T = 4
    prices = PriceSignal(rng.uniform(5, 30, T), rng.uniform(0, 5, T), rng.uniform(0, 5, T), rng.uniform(0, 5, T))
    costs = ComfortCosts(rng.uniform(0, 5, T), rng.uniform(0, 5, T), rng.uniform(0, 5, T))
    attrs = DemandAttributes(rng.uniform(0, 2, T), rng.uniform(0, 2, T), rng.uniform(0, 2, T), rng.uniform(0, 2, T))
    dp, dm, up, dn, sh = _random_decision(rng, attrs, T)
    theta = FlexDecision(up, dn, sh, dp, dm)
    gen = rng.uniform(0, 1, T)
    Q = -costs.c_sf_plus * up**2 - costs.c_sf_minus * dn**2 - costs.c_sd * sh**2
    L = (prices.p_sf_plus * up + prices.p_sf_minus * dn + prices.p_sd * sh
         - prices.p * (attrs.d_bl + up - dn + attrs.env_sd - sh - gen))
    assert consumer_utility(theta, prices, costs, attrs, gen) == pytest.approx(Q.sum() + L.sum(), abs=1e-12)


def test_decision_feasibility_checks():
    attrs = DemandAttributes([0, 0], [1, 1], [1, 1], [1, 1])
    ok = FlexDecision([0.5, 0], [0, 0.5], [0, 0], [1, 0], [0, 1])
    assert ok.is_feasible(attrs, t_max=2)
    assert not ok.is_feasible(attrs, t_max=1)
    unbalanced = FlexDecision([0.5, 0], [0, 0.2], [0, 0], [1, 0], [0, 1])
    assert unbalanced.violations(attrs)["neutrality"] == pytest.approx(0.3)
    clash = FlexDecision([0, 0], [0, 0], [0, 0], [1, 0], [1, 0])
    assert clash.violations(attrs)["exclusion"] == 1.0


def test_containers_validate_inputs():
    with pytest.raises(ValueError):
        FlexBounds([1.0, -1.0], [0, 0], [0, 0])
    with pytest.raises(ValueError):
        PriceSignal([1.0, np.nan], [0, 0], [0, 0], [0, 0])
    with pytest.raises(ValueError):
        FlexDecision([0.0], [0.0], [0.0], [2], [0])
    with pytest.raises(ValueError):
        Hyperparams(t_max=-1)
    with pytest.raises(ValueError):
        Hyperparams(gamma_sd=0.0)
    with pytest.raises(ValueError):
        Hyperparams(t_max=5).validate(4)
