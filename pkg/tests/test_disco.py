from dataclasses import replace

import numpy as np
import pytest

from ContractPricing.common import ContractViolation, InfeasiblePeriodError
from ContractPricing.disco import ContractOffer, build_opf, deliverable_shortfall, kkt_check, line_loading, \
    no_dg_baseline, payment_report, solve_disco, tie_flags
from ContractPricing.model import build_34bus, bundled_scenario
from ContractPricing.nlpcore import NlpOptions


@pytest.fixture(scope='module')
def nodg_solution(three_bus_nodg):
    return solve_disco(three_bus_nodg, ContractOffer(()))


def test_no_dg_supply_covers_demand_and_loss(three_bus_nodg, nodg_solution):
    sol = nodg_solution
    loss = sol.loss_mw[0]
    assert 0.05 < loss < 0.065
    assert sol.dispatch.p_sb[0] == pytest.approx(6. + loss, abs=1e-6)
    assert sol.objective == pytest.approx(60. * 8760. * sol.dispatch.p_sb[0], rel=1e-12)
    assert sol.objective == pytest.approx(3183559.2, rel=1e-3)
    assert sol.annual_loss_mwh == pytest.approx(loss * 8760.)


def test_no_dg_voltages_sit_at_the_upper_limit_at_the_substation(nodg_solution):
    v = nodg_solution.dispatch.v.v[:, 0]
    assert v[0] == pytest.approx(1.05, abs=1e-5)
    assert v[0] > v[1] > v[2]


def test_lmp_at_the_substation_is_the_market_price(nodg_solution):
    lmp = nodg_solution.lmp()[:, 0]
    assert lmp[0] == pytest.approx(60., abs=1e-4)
    # loss makes energy dearer down the feeder
    assert lmp[0] < lmp[1] < lmp[2] < 63.


def test_follower_kkt_holds(three_bus_nodg, nodg_solution):
    residuals = kkt_check(three_bus_nodg, ContractOffer(()), nodg_solution)
    assert set(residuals) == {'stationarity_v', 'stationarity_dg', 'stationarity_sb', 'balance', 'pinned',
                              'primal_ineq', 'dual_sign', 'complementarity'}
    assert max(residuals.values()) <= 1e-6


@pytest.mark.parametrize('alpha, full', [(60.5, True), (63., False)])
def test_single_unit_is_dispatched_below_its_lmp(single_dg_at_end, alpha, full):
    sol = solve_disco(single_dg_at_end, ContractOffer((alpha,)))
    p = sol.dispatch.p_dg[0, 0]
    if full:
        assert p == pytest.approx(1., abs=1e-4)
    else:
        assert p == pytest.approx(0., abs=1e-4)
    assert sol.payments['DG'] == pytest.approx(alpha * sol.energy['DG'])
    assert sol.objective == pytest.approx(sol.payments['market'] + sol.payments['DG'])


def test_dg_output_reduces_the_loss(single_dg_at_end, nodg_solution):
    sol = solve_disco(single_dg_at_end, ContractOffer((60.,)))
    assert sol.annual_loss_mwh < nodg_solution.annual_loss_mwh


def test_periods_are_independent(two_period_3bus):
    offer = ContractOffer((61., 61.5))
    joint = solve_disco(two_period_3bus, offer)
    mono = solve_disco(two_period_3bus, offer, monolithic=True)
    singles = [solve_disco(two_period_3bus.single_period(t), offer) for t in range(2)]
    assert joint.objective == pytest.approx(mono.objective, rel=1e-7)
    for t, s in enumerate(singles):
        assert joint.dispatch.p_sb[t] == pytest.approx(s.dispatch.p_sb[0], abs=1e-6)
        assert joint.dispatch.p_dg[:, t] == pytest.approx(s.dispatch.p_dg[:, 0], abs=1e-6)
    assert len(joint.nlp) == 2 and len(mono.nlp) == 1
    # duals of the split solve are on the scale of the joint problem
    assert joint.lmp() == pytest.approx(mono.lmp(), abs=1e-4)


def test_problem_sizes(three_bus):
    problem, lower = build_opf(three_bus, ContractOffer((60., 60.)), line_limits=False)
    assert (problem.n, problem.m_eq, problem.m_in) == (6, 3, 12)
    problem, _ = build_opf(three_bus, ContractOffer((60., 60.)))
    assert problem.m_in == 16
    assert list(lower.w_kinds()) == ['v', 'v', 'v', 'dg', 'dg', 'sb']


def test_demand_beyond_capacity_is_infeasible(three_bus):
    period = replace(three_bus.periods[0], demand=(2., 2., 2.))
    sc = replace(three_bus, periods=(period,)).validate()
    assert deliverable_shortfall(sc)[0] > 0
    with pytest.raises(InfeasiblePeriodError) as e:
        solve_disco(sc, ContractOffer((60., 60.)))
    assert e.value.period == 0


def test_offer_must_match_the_fleet(three_bus):
    with pytest.raises(ContractViolation):
        solve_disco(three_bus, ContractOffer((60.,)))
    with pytest.raises(ContractViolation):
        ContractOffer((-1., 60.))


def test_offer_helpers():
    offer = ContractOffer.uniform(3, 60.)
    assert offer.replaced(1, 61.).alpha == (60., 61., 60.)
    assert tie_flags(offer) == [(0, 1), (0, 2), (1, 2)]
    assert tie_flags(offer.replaced(1, 61.)) == [(0, 2)]


def test_reports(three_bus):
    sol = solve_disco(three_bus, ContractOffer((60.5, 61.)), NlpOptions(multistart=2))
    payments = payment_report(three_bus, sol)
    assert list(payments.columns) == ['item', 'period', 'price_eur_mwh', 'energy_mwh', 'payment_eur']
    total = payments.set_index('item').loc['total', 'payment_eur']
    assert total == pytest.approx(sol.objective)
    loading = line_loading(three_bus, sol)
    assert len(loading) == 2
    assert loading['loss_mw'].sum() == pytest.approx(sol.loss_mw[0], rel=1e-9)


def test_baseline_drops_every_unit(three_bus, nodg_solution):
    base = no_dg_baseline(three_bus)
    assert base.scenario.n_dg == 0
    assert base.objective == pytest.approx(nodg_solution.objective, rel=1e-8)


def test_unit_without_capacity_is_held_at_zero(three_bus):
    sc = three_bus.with_dgs([three_bus.dgs[0], replace(three_bus.dgs[1], p_max=0.)])
    _, lower = build_opf(sc, ContractOffer((60.5, 60.)), line_limits=False)
    assert 'fixed[DG2][0]' in lower.eq_names()
    assert not any('DG2' in name for name in lower.ineq_names())
    sol = solve_disco(sc, ContractOffer((60.5, 60.)), line_limits=False)
    assert sol.dispatch.p_dg[1, 0] == pytest.approx(0., abs=1e-9)
    assert sol.dispatch.p_dg[0, 0] > 0.99
    assert sol.duals.mu_dg_hi.shape == (2, 1)
    assert sol.duals.min_mu() >= 0.
    assert max(kkt_check(sc, sol.offer, sol).values()) <= 1e-6


def test_fixed_unit_duals_survive_flattening(three_bus):
    sc = three_bus.with_dgs([three_bus.dgs[0], replace(three_bus.dgs[1], p_max=0.)])
    sol = solve_disco(sc, ContractOffer((60.5, 60.)), line_limits=False)
    _, lower = build_opf(sc, sol.offer, line_limits=False)
    lam, mu = lower.flat_duals(sol.duals)
    again = lower.duals_from_flat(lam, mu)
    assert again.mu_dg_hi == pytest.approx(sol.duals.mu_dg_hi)
    assert again.mu_dg_lo == pytest.approx(sol.duals.mu_dg_lo)
    # only one of the two limit multipliers of a fixed unit is nonzero
    assert again.mu_dg_hi[1, 0] * again.mu_dg_lo[1, 0] == 0.


def test_rescaled_hours_scale_the_bill_only(two_period_3bus):
    offer = ContractOffer((60.5, 61.))
    sol = solve_disco(two_period_3bus, offer, line_limits=False)
    double = solve_disco(two_period_3bus.scaled_hours(2.), offer, line_limits=False)
    assert double.dispatch.p_dg == pytest.approx(sol.dispatch.p_dg, abs=1e-7)
    assert double.objective == pytest.approx(2. * sol.objective, rel=1e-7)
    assert double.lmp() == pytest.approx(sol.lmp(), rel=1e-6)


@pytest.mark.parametrize('name', ['3bus', '6bus', pytest.param('34bus-case1', marks=pytest.mark.slow),
                                  pytest.param('34bus-case3', marks=pytest.mark.slow)])
def test_dg_at_cost_reduces_the_annual_loss(name):
    sc = bundled_scenario(name)
    sol = solve_disco(sc, ContractOffer(tuple(d.cost for d in sc.dgs)))
    assert sol.dg_energy().sum() > 0
    assert sol.annual_loss_mwh < no_dg_baseline(sc).annual_loss_mwh


@pytest.mark.slow
def test_34bus_units_sell_in_the_two_expensive_periods():
    sc = build_34bus('case1')
    # above every LMP of the 62 EUR/MWh period and below the 70.8 EUR/MWh market price
    sol = solve_disco(sc, ContractOffer((68., 68.)))
    on = sol.dispatch.p_dg > 0.5
    assert on.tolist() == [[True, True, False, False, False]] * 2
    assert sol.dispatch.p_dg[:, :2] == pytest.approx(1., abs=1e-8)
    assert sol.dg_energy() == pytest.approx([3504., 3504.], abs=1e-4)
    assert sol.payments['DG1'] == pytest.approx(68. * 3504., rel=1e-8)
