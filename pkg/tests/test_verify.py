from dataclasses import replace

import numpy as np
import pytest

from ContractPricing.disco import ContractOffer, solve_disco
from ContractPricing.epec import ACCEPTED, EpecOptions, EpecSolution, solve_epec
from ContractPricing.nlpcore import NlpOptions
from ContractPricing.run import market_start
from ContractPricing.verify import DiagonalizationTrace, SweepCurve, diagonalize, resolve_check, sweep_profit


def _as_equilibrium(scenario, offer):
    disco = solve_disco(scenario, offer)
    return EpecSolution(alpha=offer, point=None, multipliers=[], c_pen=0., status=ACCEPTED, iters=0,
                        wall_seconds=0., start_id=0, disco=disco)


def _curve(profits, failed=None, center=61.):
    alphas = np.array([60., 60.5, 61., 61.5, 62.])
    profits = np.asarray(profits, dtype=float)
    failed = np.zeros(len(alphas), dtype=bool) if failed is None else np.asarray(failed)
    return SweepCurve(0, alphas, profits, np.ones(len(alphas)), failed, center)


def test_sweep_curve_nash_test():
    assert _curve([0., 5., 10., 8., 2.]).is_nash()
    assert not _curve([0., 5., 10., 12., 2.]).is_nash()
    # within the relative tolerance
    assert _curve([0., 5., 10., 10.005, 2.]).is_nash()
    # failed grid points are ignored, a failed center is not
    assert _curve([0., 5., 10., np.nan, 2.], failed=[0, 0, 0, 1, 0]).is_nash()
    assert not _curve([0., 5., np.nan, 8., 2.], failed=[0, 0, 1, 0, 0]).is_nash()
    assert _curve([0., 5., 10., 8., 2.]).center_index == 2


def test_sweep_curve_rejects_unordered_grid():
    with pytest.raises(AssertionError):
        SweepCurve(0, np.array([61., 60.]), np.zeros(2), np.zeros(2), np.zeros(2, dtype=bool), 61.)


def test_sweep_profit_around_a_price(single_dg_at_end):
    curve = sweep_profit(single_dg_at_end, ContractOffer((61.,)), 0, half_width=1., step=0.5)
    assert curve.alphas == pytest.approx([60., 60.5, 61., 61.5, 62.])
    assert not curve.failed.any()
    assert curve.profits[0] == 0.
    assert np.all(np.diff(curve.energies) <= 1.)
    frame = curve.to_frame()
    assert list(frame.columns) == ['alpha_eur_mwh', 'profit_eur', 'energy_mwh', 'failed']


def test_sweep_curve_takes_plain_lists():
    curve = SweepCurve(0, [60., 61., 62.], [0., 10., 8.], [1., 1., 0.5], [0, 1, 0], 60.)
    assert curve.failed.dtype == bool
    assert curve.failed.tolist() == [False, True, False]
    # the failed maximum at 61 is skipped, so 60 is not the best grid profit
    assert not curve.is_nash()
    assert SweepCurve(0, [60., 61., 62.], [0., 10., 8.], [1., 1., 0.5], [0, 0, 1], 61.).is_nash()


def test_dispatched_energy_falls_as_the_price_rises(three_bus):
    offer = ContractOffer((60.5, 60.5))
    for i in range(three_bus.n_dg):
        curve = sweep_profit(three_bus, offer, i, half_width=1., step=0.1)
        assert not curve.failed.any()
        assert np.all(np.diff(curve.energies) <= 1e-6 * 8760.)
        assert curve.energies[0] > curve.energies[-1]


def test_resolve_check_agrees_with_itself(three_bus):
    eq = _as_equilibrium(three_bus, ContractOffer((60.8, 61.2)))
    report = resolve_check(three_bus, eq)
    assert report.passed, report.discrepancies
    assert set(report.rows['quantity']) >= {'P_sb[0]', 'P_dg[DG1][0]', 'payment[market]', 'profit[DG2]'}
    assert len(report.discrepancies) == 0


def test_resolve_check_flags_a_wrong_dispatch(three_bus):
    eq = _as_equilibrium(three_bus, ContractOffer((60.8, 61.2)))
    eq.disco.dispatch.p_sb[0] += 0.5
    report = resolve_check(three_bus, eq)
    assert not report.passed
    assert 'P_sb[0]' in set(report.discrepancies['quantity'])


def test_resolve_check_without_follower(three_bus):
    eq = _as_equilibrium(three_bus, ContractOffer((60.8, 61.2)))
    eq.disco = None
    report = resolve_check(three_bus, eq)
    assert not report.passed and 'follower' in report.message


def test_trace_frame():
    trace = DiagonalizationTrace(sweeps=[np.array([60., 61.]), np.array([60.5, 61.1])])
    frame = trace.to_frame(['DG1', 'DG2'])
    assert list(frame.columns) == ['sweep', 'alpha_DG1', 'alpha_DG2']
    assert frame['alpha_DG2'].tolist() == [61., 61.1]
    assert trace.n_sweeps == 2


@pytest.mark.slow
def test_lone_unit_converges_in_one_sweep(single_dg_at_end, epec_options):
    trace, offer = diagonalize(single_dg_at_end, ContractOffer((60.,)), options=epec_options)
    assert trace.converged and not trace.failed
    assert trace.n_sweeps == 1 and trace.accuracy == 0.
    assert 60.5 < offer.alpha[0] < 62.5


@pytest.mark.slow
def test_diagonalization_agrees_with_the_3bus_equilibrium(three_bus, epec_options):
    trace, offer = diagonalize(three_bus, ContractOffer((60., 60.)), tol=1e-6, max_sweeps=30, options=epec_options)
    assert trace.converged and not trace.failed
    assert 60. < offer.alpha[0] < offer.alpha[1] < 62.5
    sol = solve_epec(three_bus, replace(epec_options, starts=3))
    assert sol.accepted
    assert offer.as_array() == pytest.approx(sol.alpha.as_array(), abs=1e-3)


@pytest.fixture(scope='module')
def equilibrium_6bus(six_bus):
    options = EpecOptions(starts=4, line_limits=False, nlp=NlpOptions(mu0=1e-2, max_iter=1000),
                          disco=NlpOptions(tol=1e-8))
    return options, solve_epec(six_bus, options)


@pytest.mark.slow
def test_6bus_equilibrium_is_accepted(six_bus, equilibrium_6bus):
    _, sol = equilibrium_6bus
    assert sol.accepted
    assert sol.c_pen <= 1e-6 and sol.checks['products'] <= 1e-8
    assert np.all(sol.alpha.as_array() >= [d.cost for d in six_bus.dgs])


@pytest.mark.slow
def test_6bus_techniques_agree(six_bus, equilibrium_6bus):
    options, sol = equilibrium_6bus
    trace, offer = diagonalize(six_bus, market_start(six_bus), tol=1e-6, options=options)
    assert trace.converged and not trace.failed
    assert offer.as_array() == pytest.approx(sol.alpha.as_array(), abs=1e-3)
    report = resolve_check(six_bus, sol, line_limits=False)
    assert report.passed, report.discrepancies


@pytest.mark.slow
def test_6bus_equilibrium_survives_unilateral_sweeps(six_bus, equilibrium_6bus):
    _, sol = equilibrium_6bus
    for i in range(six_bus.n_dg):
        curve = sweep_profit(six_bus, sol, i, half_width=5., step=0.1, line_limits=False)
        assert curve.is_nash(), curve.to_frame()
