from dataclasses import replace

import pytest

from ContractPricing.epec import EpecOptions
from ContractPricing.model import DgUnit, Period, build_3bus, build_6bus
from ContractPricing.nlpcore import NlpOptions


@pytest.fixture(scope='session')
def three_bus():
    return build_3bus()


@pytest.fixture(scope='session')
def three_bus_nodg(three_bus):
    return three_bus.with_dgs([], label='3-bus without DG')


@pytest.fixture(scope='session')
def single_dg_at_end(three_bus):
    """One unit at the far end of the 3-bus feeder."""
    return three_bus.with_dgs([DgUnit('DG', '3', 0., 1., 60.)], label='3-bus single DG')


@pytest.fixture(scope='session')
def two_period_3bus(three_bus):
    demand = three_bus.periods[0].demand
    periods = (Period(0, 4380., 60., demand), Period(1, 4380., 50., tuple(0.5 * d for d in demand)))
    return replace(three_bus, periods=periods, label='3-bus two periods').validate()


@pytest.fixture(scope='session')
def six_bus():
    return build_6bus()


@pytest.fixture
def nlp_options():
    return NlpOptions(tol=1e-8, max_iter=300)


@pytest.fixture
def epec_options():
    return EpecOptions(starts=2, line_limits=False, nlp=NlpOptions(mu0=1e-2, max_iter=1000),
                       disco=NlpOptions(tol=1e-8))
