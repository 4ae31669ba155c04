from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from ContractPricing.common import ReconstructionError, ScenarioParseError, ScenarioValidationError
from ContractPricing.disco import ContractOffer, solve_disco
from ContractPricing.model import HOURS_PER_YEAR, DgUnit, Line, build_3bus_symmetric, build_34bus, bundled_scenario, \
    dump_scenario, load_scenario, reconstruct_demand_levels, save_scenario, scenario_from_dict


def test_3bus_layout(three_bus):
    net = three_bus.network
    assert net.n_bus == 3 and net.n_line == 2
    assert net.sb_index == 0
    assert [d.bus for d in three_bus.dgs] == ['2', '3']
    demand = three_bus.demand_matrix()
    assert demand.shape == (3, 1)
    assert demand.sum() == pytest.approx(0.6)
    assert three_bus.total_hours == HOURS_PER_YEAR
    frm, to, z = net.line_ends()
    assert list(frm) == [0, 1] and list(to) == [1, 2]
    assert z == pytest.approx(np.array([1.236, 1.144]) * net.impedance_scale)


def test_symmetric_3bus_places_substation_in_the_middle():
    sc = build_3bus_symmetric()
    assert sc.network.substation.bus == '2'
    assert [d.bus for d in sc.dgs] == ['1', '3']


def test_34bus_case1_periods():
    sc = build_34bus('case1')
    assert sc.network.n_bus == 34
    assert list(sc.prices) == [80., 70.8, 62., 50., 41.]
    assert list(sc.hours) == [1752.] * 5
    assert sc.total_hours == HOURS_PER_YEAR
    assert [d.id for d in sc.dgs] == ['DG1', 'DG2']
    # demand falls with the price level
    totals = sc.demand_matrix().sum(axis=0)
    assert np.all(np.diff(totals) < 0)


def test_34bus_cases_differ_in_fleet():
    assert build_34bus('nodg').n_dg == 0
    assert [d.id for d in build_34bus('case4').dgs] == ['DG1', 'DG2', 'DG3', 'DG4']
    assert build_34bus('case2').dgs[0].cost == 70.


def test_bundled_names():
    assert bundled_scenario('3bus-nodg').n_dg == 0
    assert bundled_scenario('3bus-raw').network.impedance_scale == 1.
    assert bundled_scenario('ow1').n_dg == 2
    assert bundled_scenario('34bus-case3').n_dg == 3
    with pytest.raises(KeyError):
        bundled_scenario('no-such-system')


def test_unknown_case_is_rejected():
    with pytest.raises(ScenarioValidationError) as e:
        build_34bus('case9')
    assert e.value.field == 'cases'


@pytest.mark.parametrize('mutate, field', [
    (lambda sc: replace(sc, network=replace(sc.network, lines=(Line('1', '2', -1., 1.), sc.network.lines[1]))),
     'line[0].z'),
    (lambda sc: replace(sc, network=replace(sc.network, lines=(sc.network.lines[0],))), 'line'),
    (lambda sc: replace(sc, dgs=(DgUnit('DG1', '7', 0., 1., 60.),)), 'dg[0].bus'),
    (lambda sc: replace(sc, dgs=(DgUnit('DG1', '2', 2., 1., 60.),)), 'dg[0]'),
    (lambda sc: replace(sc, periods=(replace(sc.periods[0], hours=0.),)), 'period[0].hours'),
    (lambda sc: replace(sc, periods=(replace(sc.periods[0], demand=(0.2, 0.2)),)), 'period[0].demand'),
])
def test_validation_names_the_field(three_bus, mutate, field):
    with pytest.raises(ScenarioValidationError) as e:
        mutate(three_bus).validate()
    assert e.value.field == field


def test_duplicate_line_is_rejected(three_bus):
    net = three_bus.network
    sc = replace(three_bus, network=replace(net, lines=net.lines + (Line('2', '1', 1., 1.),)))
    with pytest.raises(ScenarioValidationError, match='duplicate'):
        sc.validate()


def test_parse_error_reports_position(tmp_path):
    path = tmp_path / 'broken.yaml'
    path.write_text('network:\n  base_mva: [10\nbus: []\n')
    with pytest.raises(ScenarioParseError) as e:
        load_scenario(str(path))
    assert e.value.line > 0


def test_missing_section(three_bus):
    raw = dump_scenario(three_bus)
    del raw['substation']
    with pytest.raises(ScenarioValidationError) as e:
        scenario_from_dict(raw)
    assert e.value.field == 'substation'


def test_save_and_load_keep_the_scenario(three_bus, tmp_path):
    path = save_scenario(three_bus, str(tmp_path / 'sc.yaml'))
    again = load_scenario(path)
    assert again.network == three_bus.network
    assert again.dgs == three_bus.dgs
    assert again.periods == three_bus.periods


def test_derived_scenarios(three_bus):
    assert [d.cost for d in three_bus.with_costs({'DG1': 70.}).dgs] == [70., 60.]
    assert three_bus.scaled_hours(0.5).total_hours == pytest.approx(4380.)
    two = replace(three_bus, periods=three_bus.periods * 2)
    assert two.single_period(1).n_period == 1


def test_reconstruction_recovers_a_known_demand(three_bus_nodg):
    sol = solve_disco(three_bus_nodg, ContractOffer(()))
    payment = sol.payments['market']
    levels = reconstruct_demand_levels([payment, 0.], [60., 50.], three_bus_nodg.network, HOURS_PER_YEAR,
                                       loaded=('1', '2', '3'))
    assert levels[0] == pytest.approx(6., abs=1e-4)
    assert levels[1] == 0.


def test_reconstruction_rejects_supply_beyond_the_substation(three_bus_nodg):
    with pytest.raises(ReconstructionError) as e:
        reconstruct_demand_levels([60. * 8760. * 50.], [60.], three_bus_nodg.network, HOURS_PER_YEAR)
    assert e.value.period == 0


@pytest.mark.parametrize('section', ['bus', 'substation', 'period'])
def test_empty_section_is_a_validation_error(three_bus, section):
    raw = dump_scenario(three_bus)
    raw[section] = None
    with pytest.raises(ScenarioValidationError) as e:
        scenario_from_dict(raw)
    assert e.value.field == section


def test_substation_needs_a_limit(three_bus):
    raw = dump_scenario(three_bus)
    del raw['substation']['p_max']
    with pytest.raises(ScenarioValidationError) as e:
        scenario_from_dict(raw)
    assert e.value.field == 'substation.p_max'


def test_reconstruction_needs_a_bracketed_demand(three_bus_nodg, monkeypatch):
    # a follower that never buys anything cannot explain a positive payment
    monkeypatch.setattr('ContractPricing.disco.solve_disco',
                        lambda sc, offer, options=None: SimpleNamespace(dispatch=SimpleNamespace(p_sb=np.zeros(1))))
    with pytest.raises(ReconstructionError, match='not bracketed') as e:
        reconstruct_demand_levels([0., 60. * 8760. * 5.], [60., 60.], three_bus_nodg.network, HOURS_PER_YEAR)
    assert e.value.period == 1
