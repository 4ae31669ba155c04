import glob
import os

import pytest
import yaml

from ContractPricing.model import build_3bus
from ContractPricing.reports import load_case_report
from ContractPricing.run import RunConfig, config_from_dict, market_start, run, run_audit
from create_variants_of_set_config import expand_set_fields

CONFS = sorted(glob.glob(os.path.join(os.path.dirname(__file__), '..', 'confs', '*.yaml')))


def test_sections_map_onto_the_run_config():
    conf = dict(case=dict(scenario='6bus', mode='verify', line_limits=False),
                solver=dict(tol=1e-6, multistart=4),
                epec=dict(epsilon_comp=1e-5),
                verify=dict(half_width=2., step=0.05),
                sweep=dict(dgs=['DG1']))
    config = config_from_dict(conf)
    assert config.scenario == '6bus' and config.mode == 'verify' and not config.line_limits
    assert config.tol == 1e-6 and config.multistart == 4
    assert config.epsilon_comp == 1e-5
    assert config.sweep_dgs == ['DG1']
    assert config.epec_options().starts == 4
    assert config.epec_options().nlp.tol == 1e-6


def test_overrides_win_unless_none():
    conf = dict(case=dict(scenario='6bus', seed=3))
    config = config_from_dict(conf, scenario='3bus', seed=None, out=None)
    assert config.scenario == '3bus'
    assert config.seed == 3
    assert config.out is None


def test_unknown_keys_are_rejected():
    with pytest.raises(AssertionError):
        config_from_dict(dict(solver=dict(tolerance=1e-6)))


@pytest.mark.parametrize('kwargs', [dict(mode='nash'), dict(tol=0.), dict(hessian_mode='bfgs'),
                                    dict(step=1., half_width=0.5)])
def test_run_config_validation(kwargs):
    with pytest.raises(AssertionError):
        RunConfig(**kwargs)


def test_trace_and_tensorboard_need_an_output_directory(tmp_path):
    assert RunConfig(trace=True).nlp_options().trace_path is None
    options = RunConfig(trace=True, tensorboard=True, out=str(tmp_path)).nlp_options()
    assert options.trace_path == os.path.join(str(tmp_path), 'trace.csv')
    assert options.writer_dir == os.path.join(str(tmp_path), 'tb')


@pytest.mark.parametrize('path', CONFS, ids=os.path.basename)
def test_shipped_configs_are_valid(path):
    with open(path) as f:
        conf = yaml.safe_load(f)
    for variant, _ in expand_set_fields(conf, 'x'):
        config = config_from_dict(variant)
        assert config.out.startswith('results/')


def test_market_start_prices_active_units_at_the_weighted_market_price():
    assert market_start(build_3bus()).alpha == (60., 60.)
    assert market_start(build_3bus().with_dgs([])).alpha == ()


def test_disco_only_run_writes_a_report(tmp_path):
    out = str(tmp_path / 'nodg')
    report, code = run(RunConfig(scenario='3bus-nodg', mode='disco-only', out=out, line_limits=False))
    assert code == 0
    assert report.verification['audit']['passed']
    for name in ('report.yaml', 'dg.csv', 'disco.csv', 'computation.csv', 'run.log'):
        assert os.path.exists(os.path.join(out, name))
    assert load_case_report(out).disco['payment_eur'] == pytest.approx(report.disco['payment_eur'])
    result, code = run_audit(out)
    assert code == 0 and result.passed


def test_disco_only_run_at_fixed_prices():
    report, code = run(RunConfig(scenario='3bus', mode='disco-only', alpha=[60.8, 61.2], line_limits=False))
    assert code == 0
    assert [r['alpha'] for r in report.dg] == [60.8, 61.2]
    assert report.disco['loss_change_pct'] < 0.
    assert report.computation['variables'] == 6


def test_fixed_prices_must_match_the_fleet():
    with pytest.raises(AssertionError):
        run(RunConfig(scenario='3bus', mode='disco-only', alpha=[60.]))


def test_agreement_tolerances():
    assert RunConfig().agree_tol == 1e-3 and RunConfig().diag_tol == 1e-6
    with open(os.path.join(os.path.dirname(__file__), '..', 'confs', '6bus_verify.yaml')) as f:
        config = config_from_dict(yaml.safe_load(f))
    assert config.agree_tol == 1e-3 and config.diag_tol == 1e-6
