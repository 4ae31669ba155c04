"""Runner: one case end to end, from a YAML config in ``confs/`` plus command-line overrides.

    python -m ContractPricing.run -c confs/3bus_epec.yaml
    python -m ContractPricing.run sweep -c confs/34bus_case1.yaml --out results/case1
    python -m ContractPricing.run audit --out results/case1
"""
import logging
import os
import sys
import time
from dataclasses import dataclass, replace
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from theconf import Config as C, ConfigArgumentParser

from ContractPricing.common import get_logger, add_filehandler, ContractPricingError
from ContractPricing.disco import ContractOffer, no_dg_baseline, solve_disco
from ContractPricing.metrics import Accumulator
from ContractPricing.epec import EpecOptions, active_units, costs, deviation_gain, solve_epec, solve_single_owner
from ContractPricing.model import bundled_scenario, reconstruct_demand_levels
from ContractPricing.nlpcore import NlpOptions
from ContractPricing.reports import CaseReport, audit, case_report, competition_impact, load_case_report, \
    write_case_report
from ContractPricing.verify import diagonalize, resolve_check, sweep_profit

logger = get_logger('ContractPricing')

MODES = ('epec', 'diagonalize', 'disco-only', 'single-owner', 'sweep', 'verify')
VERBS = ('run', 'audit', 'sweep', 'reconstruct')


@dataclass
class RunConfig:
    scenario: str = '3bus'
    mode: str = 'epec'
    out: Optional[str] = None
    seed: int = 0
    label: Optional[str] = None
    line_limits: bool = True
    alpha: Optional[List[float]] = None     # fixed prices for disco-only / sweep, start for diagonalize
    # solver
    tol: float = 1e-8
    max_iter: int = 1000
    mu0: float = 1e-2
    multistart: int = 8
    disco_multistart: int = 1
    hessian_mode: str = 'exact'
    trace: bool = False
    tensorboard: bool = False
    verbose: bool = False
    # epec
    alpha_cap_factor: float = 10.
    epsilon_comp: float = 1e-6
    compare_competition: bool = False
    # verify
    diag_tol: float = 1e-6
    max_sweeps: int = 50
    half_width: float = 5.
    step: float = 0.1
    resolve_rtol: float = 1e-3
    agree_tol: float = 1e-3
    # sweep
    sweep_dgs: Optional[List[str]] = None

    def __post_init__(self):
        assert self.mode in MODES, f'unknown mode {self.mode!r}, expected one of {MODES}'
        assert self.tol > 0 and self.max_iter > 0 and self.multistart >= 1, 'invalid solver options'
        assert self.hessian_mode in ('exact', 'quasi-newton'), f'unknown hessian mode {self.hessian_mode!r}'
        assert self.step > 0 and self.half_width >= self.step, 'sweep needs step > 0 and half_width >= step'

    def nlp_options(self):
        return NlpOptions(tol=self.tol, max_iter=self.max_iter, mu0=self.mu0, seed=self.seed,
                          hessian_mode=self.hessian_mode, verbose=self.verbose,
                          trace_path=os.path.join(self.out, 'trace.csv') if self.trace and self.out else None,
                          writer_dir=os.path.join(self.out, 'tb') if self.tensorboard and self.out else None)

    def disco_options(self):
        return NlpOptions(tol=self.tol, seed=self.seed, multistart=self.disco_multistart,
                          hessian_mode=self.hessian_mode)

    def epec_options(self):
        return EpecOptions(epsilon_comp=self.epsilon_comp, alpha_cap_factor=self.alpha_cap_factor,
                           starts=self.multistart, seed=self.seed, line_limits=self.line_limits,
                           nlp=self.nlp_options(), disco=self.disco_options(), verbose=self.verbose,
                           writer_dir=os.path.join(self.out, 'tb') if self.tensorboard and self.out else None)


_SECTIONS = dict(
    case=('scenario', 'mode', 'out', 'seed', 'label', 'line_limits', 'alpha'),
    solver=('tol', 'max_iter', 'mu0', 'multistart', 'disco_multistart', 'hessian_mode', 'trace', 'tensorboard',
            'verbose'),
    epec=('alpha_cap_factor', 'epsilon_comp', 'compare_competition'),
    verify=('diag_tol', 'max_sweeps', 'half_width', 'step', 'resolve_rtol', 'agree_tol'),
    sweep=('dgs',),
)


def config_from_dict(conf: Dict, **overrides) -> RunConfig:
    """RunConfig from the sectioned YAML layout; ``None`` overrides are ignored."""
    values = {}
    for section, keys in _SECTIONS.items():
        part = conf.get(section) or {}
        unknown = set(part) - set(keys)
        assert not unknown, f'unknown keys in section {section!r}: {sorted(unknown)}'
        for k in keys:
            if k in part:
                values['sweep_dgs' if section == 'sweep' else k] = part[k]
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


# ---------------------------------------------------------------------------
# pipelines


def _computation_disco(sol):
    acc = Accumulator()
    for s in sol.nlp:
        acc.add('variables', len(s.x))
        acc.add('constraints', len(s.lambda_eq) + len(s.mu_ineq))
        acc.add('iterations', s.iters)
        acc.maximum('accuracy', s.worst_residual)
    comp = {k: int(v) for k, v in acc.items() if k != 'accuracy'}
    comp.update(cpu_seconds=sol.wall_seconds, accuracy=float(acc['accuracy']) if 'accuracy' in acc else 0.)
    return comp


def _computation_epec(sol):
    comp = dict(sol.sizes)
    comp.update(iterations=sol.iters, cpu_seconds=sol.wall_seconds, accuracy=sol.c_pen, starts=len(sol.attempts),
                accepted_starts=sum(a.accepted for a in sol.attempts), distinct_points=len(sol.distinct))
    return comp


def _offer_from_config(scenario, config: RunConfig, default):
    if config.alpha is None:
        return default
    assert len(config.alpha) == scenario.n_dg, f'alpha needs {scenario.n_dg} prices, got {len(config.alpha)}'
    return ContractOffer(tuple(float(a) for a in config.alpha))


def market_start(scenario):
    """Every active unit at the time-weighted market price, the others at cost."""
    weighted = float(scenario.prices @ scenario.hours / scenario.hours.sum())
    alpha = costs(scenario)
    alpha[list(active_units(scenario))] = weighted
    return ContractOffer(tuple(alpha))


def _baseline(scenario, config):
    try:
        return no_dg_baseline(scenario, config.disco_options(), line_limits=config.line_limits)
    except ContractPricingError as e:
        logger.warning('no-DG baseline failed: %s', e)
        return None


def _epec_report(scenario, config, sol, baseline, mode):
    return case_report(scenario, mode, sol.disco, sol.status, _computation_epec(sol), baseline, sol)


def run_disco_only(scenario, config, baseline):
    offer = _offer_from_config(scenario, config, ContractOffer(tuple(costs(scenario))))
    sol = solve_disco(scenario, offer, config.disco_options(), line_limits=config.line_limits)
    return case_report(scenario, 'disco-only', sol, 'solved', _computation_disco(sol), baseline), True


def run_epec(scenario, config, baseline):
    sol = solve_epec(scenario, config.epec_options())
    return _epec_report(scenario, config, sol, baseline, 'epec'), sol.accepted


def run_single_owner(scenario, config, baseline):
    options = config.epec_options()
    sol = solve_single_owner(scenario, options)
    report = _epec_report(scenario, config, sol, baseline, 'single-owner')
    if config.compare_competition and sol.accepted:
        competition = solve_epec(scenario, options)
        if competition.accepted:
            gains = deviation_gain(scenario, sol.alpha, options.disco, config.half_width, config.step,
                                   config.line_limits)
            report.comparison = competition_impact(_epec_report(scenario, config, competition, None, 'epec'),
                                                   report, gains)
        else:
            logger.warning('competition equilibrium not accepted; no comparison reported')
    return report, sol.accepted


def run_diagonalize(scenario, config, baseline, write=True):
    start = _offer_from_config(scenario, config, market_start(scenario))
    trace, offer = diagonalize(scenario, start, config.diag_tol, config.max_sweeps, config.epec_options())
    disco = solve_disco(scenario, offer, config.disco_options(), line_limits=config.line_limits)
    computation = dict(sweeps=trace.n_sweeps, iterations=trace.iters, cpu_seconds=trace.wall_seconds,
                       accuracy=trace.accuracy, cycle_detected=trace.cycle_detected, failed=trace.failed)
    report = case_report(scenario, 'diagonalize', disco, 'accepted' if trace.converged else 'not_found',
                         computation, baseline)
    if write and config.out:
        trace.to_frame([d.id for d in scenario.dgs]).to_csv(os.path.join(config.out, 'diagonalization.csv'),
                                                            index=False)
    return report, trace.converged, trace, offer


def _sweep_targets(scenario, config):
    ids = [d.id for d in scenario.dgs]
    if not config.sweep_dgs:
        return list(active_units(scenario))
    missing = [d for d in config.sweep_dgs if d not in ids]
    assert not missing, f'sweep names unknown units {missing}'
    return [ids.index(d) for d in config.sweep_dgs]


def _sweeps(scenario, config, offer):
    results = {}
    for i in _sweep_targets(scenario, config):
        curve = sweep_profit(scenario, offer, i, config.half_width, config.step, config.disco_options(),
                             config.line_limits)
        dg = scenario.dgs[i].id
        if config.out:
            curve.to_frame().to_csv(os.path.join(config.out, f'sweep_{dg}.csv'), index=False)
        best = int(np.nanargmax(np.where(curve.failed, np.nan, curve.profits))) if (~curve.failed).any() else -1
        results[dg] = dict(is_nash=curve.is_nash(), alpha=float(curve.center),
                           best_grid_alpha=float(curve.alphas[best]) if best >= 0 else None,
                           failed_points=int(curve.failed.sum()))
    return results


def run_sweep(scenario, config, baseline):
    if config.alpha is not None:
        offer = _offer_from_config(scenario, config, None)
        disco = solve_disco(scenario, offer, config.disco_options(), line_limits=config.line_limits)
        report = case_report(scenario, 'sweep', disco, 'solved', _computation_disco(disco), baseline)
        ok = True
    else:
        sol = solve_epec(scenario, config.epec_options())
        report = _epec_report(scenario, config, sol, baseline, 'sweep')
        ok, offer = sol.accepted, sol.alpha
        if not ok:
            logger.warning('no accepted equilibrium to sweep around')
            return report, False
    report.verification['sweeps'] = _sweeps(scenario, config, offer)
    return report, ok


def run_verify(scenario, config, baseline):
    """Equilibrium, then diagonalization from the market start, deviation sweeps and a fresh re-solve."""
    sol = solve_epec(scenario, config.epec_options())
    report = _epec_report(scenario, config, sol, baseline, 'verify')
    if not sol.accepted:
        return report, False
    _, converged, trace, offer = run_diagonalize(scenario, config, None)
    gap = float(np.max(np.abs(offer.as_array() - sol.alpha.as_array()))) if scenario.n_dg else 0.
    sweeps = _sweeps(scenario, config, sol.alpha)
    resolved = resolve_check(scenario, sol, NlpOptions(tol=config.tol, multistart=3, seed=config.seed),
                             config.resolve_rtol, config.line_limits)
    report.verification = dict(
        diagonalization=dict(converged=converged, sweeps=trace.n_sweeps, cycle_detected=trace.cycle_detected,
                             alpha=[float(a) for a in offer.alpha], max_gap=gap, agrees=gap <= config.agree_tol),
        sweeps=sweeps,
        resolve=dict(passed=resolved.passed, message=resolved.message,
                     discrepancies=resolved.discrepancies['quantity'].tolist() if len(resolved.rows) else []),
    )
    ok = converged and gap <= config.agree_tol and all(s['is_nash'] for s in sweeps.values()) and resolved.passed
    return report, ok


PIPELINES = {
    'epec': run_epec,
    'single-owner': run_single_owner,
    'disco-only': run_disco_only,
    'diagonalize': lambda sc, cfg, base: run_diagonalize(sc, cfg, base)[:2],
    'sweep': run_sweep,
    'verify': run_verify,
}


def run(config: RunConfig):
    """Execute one case; returns ``(report, exit_code)`` with exit code 0 iff accepted."""
    handlers = []
    if config.out:
        os.makedirs(config.out, exist_ok=True)
        assert os.access(config.out, os.W_OK), f'output directory {config.out} is not writable'
        handlers = [(lg, add_filehandler(lg, os.path.join(config.out, 'run.log'))) for lg in _package_loggers()]
    try:
        return _run(config)
    finally:
        for lg, fh in handlers:
            lg.removeHandler(fh)
            fh.close()


def _package_loggers():
    names = [n for n in logging.root.manager.loggerDict if n == 'ContractPricing' or n.startswith('ContractPricing.')]
    return [logging.getLogger(n) for n in sorted(names)]


def _run(config: RunConfig):
    t0 = time.time()
    scenario = bundled_scenario(config.scenario)
    if config.label:
        scenario = replace(scenario, label=config.label)
    if scenario.notes:
        logger.info('%s: %s', scenario.label, scenario.notes)
    logger.info('%s: mode=%s seed=%d tol=%.0e', scenario.label, config.mode, config.seed, config.tol)

    baseline = _baseline(scenario, config)
    try:
        report, ok = PIPELINES[config.mode](scenario, config, baseline)
    except ContractPricingError as e:
        logger.error('%s failed: %s', config.mode, e)
        report, ok = CaseReport(label=scenario.label, mode=config.mode, status=f'error: {e}', notes=scenario.notes,
                                prices=list(scenario.prices), hours=list(scenario.hours)), False

    checked = audit(report)
    report.verification['audit'] = dict(passed=checked.passed, worst_rel_error=checked.worst)
    if config.out:
        write_case_report(report, config.out)
    for r in report.dg:
        logger.info('%s @ bus %s: alpha=%.2f EUR/MWh energy=%.0f MWh profit=%.0f EUR', r['id'], r['bus'],
                    r['alpha'], r['energy_mwh'], r['profit_eur'])
    if report.disco:
        logger.info('DisCo payment %.0f EUR, loss %.1f MWh', report.disco['payment_eur'], report.disco['loss_mwh'])
    if not ok:
        logger.warning('%s %s not accepted (status %s); best attempt diagnostics in report.yaml', scenario.label,
                       config.mode, report.status)
    logger.info('elapsed time: %.2f s', time.time() - t0)
    return report, 0 if ok else 1


def run_audit(out):
    result = audit(load_case_report(out))
    frame = result.to_frame()
    logger.info('\n%s', frame.to_string(index=False) if len(frame) else 'nothing to audit')
    return result, 0 if result.passed else 1


def run_reconstruct(conf: Dict, config: RunConfig):
    part = conf.get('reconstruct') or {}
    scenario = bundled_scenario(config.scenario)
    levels = reconstruct_demand_levels(part['payments'], part['prices'], scenario.network, part.get('hours', 1752.),
                                       options=config.disco_options())
    frame = pd.DataFrame(dict(price_eur_mwh=part['prices'], payment_eur=part['payments'], demand_mw=levels))
    if config.out:
        os.makedirs(config.out, exist_ok=True)
        frame.to_csv(os.path.join(config.out, 'demand_levels.csv'), index=False)
    logger.info('\n%s', frame.to_string(index=False))
    return frame, 0


def parse_args(argv=None):
    parser = ConfigArgumentParser(conflict_handler='resolve')
    parser.add_argument('verb', nargs='?', default='run', choices=VERBS)
    parser.add_argument('--scenario', type=str, default=None, help='bundled name or dataset path')
    parser.add_argument('--mode', type=str, default=None, choices=MODES)
    parser.add_argument('--tol', type=float, default=None)
    parser.add_argument('--multistart', type=int, default=None)
    parser.add_argument('--seed', type=int, default=None)
    parser.add_argument('--out', type=str, default=None)
    parser.add_argument('--trace', action='store_true', default=None)
    return parser.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    conf = dict(C.get()) if getattr(args, 'config', None) else {}
    mode = 'sweep' if args.verb == 'sweep' else args.mode
    config = config_from_dict(conf, scenario=args.scenario, mode=mode, tol=args.tol, multistart=args.multistart,
                              seed=args.seed, out=args.out, trace=args.trace)
    if args.verb == 'audit':
        assert config.out, 'audit needs --out pointing at a run directory'
        return run_audit(config.out)[1]
    if args.verb == 'reconstruct':
        return run_reconstruct(conf, config)[1]
    return run(config)[1]


if __name__ == '__main__':
    sys.exit(main())
