"""Case reports: what a run prints and writes, and the arithmetic audit of its numbers."""
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import yaml

from ContractPricing.common import get_logger
from ContractPricing.disco import DiscoSolution
from ContractPricing.epec import EpecSolution, profit
from ContractPricing.model import Scenario

logger = get_logger('ContractPricing.reports')

AUDIT_RTOL = 2e-3


@dataclass
class CaseReport:
    label: str
    mode: str
    status: str
    notes: str = ''
    prices: List[float] = field(default_factory=list)        # €/MWh per period
    hours: List[float] = field(default_factory=list)
    dg: List[Dict] = field(default_factory=list)             # id, bus, cost, alpha, energy_mwh, profit_eur, payment_eur
    disco: Dict = field(default_factory=dict)
    baseline: Optional[Dict] = None                          # the same scenario without DG
    computation: Dict = field(default_factory=dict)
    verification: Dict = field(default_factory=dict)
    comparison: Dict = field(default_factory=dict)
    attempts: List[Dict] = field(default_factory=list)
    distinct: List[List[float]] = field(default_factory=list)

    @property
    def accepted(self):
        return self.status in ('accepted', 'solved')

    def to_dict(self):
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, raw):
        known = {k: raw[k] for k in cls.__dataclass_fields__ if k in raw}
        return cls(**known)


def _plain(obj):
    """Nested python scalars/lists only, so that yaml.safe_dump accepts it."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def disco_summary(solution: DiscoSolution):
    return dict(payment_eur=solution.objective,
                market_payment_eur=solution.payments['market'],
                market_energy_mwh=solution.energy['market'],
                market_payment_by_period=list(solution.market_payment_by_period),
                market_energy_by_period=list(solution.market_energy_by_period),
                loss_mwh=solution.annual_loss_mwh,
                loss_by_period_mwh=list(solution.loss_mwh))


def dg_rows(scenario: Scenario, disco: DiscoSolution):
    gains = profit(scenario, disco.offer, disco.dispatch)
    return [dict(id=d.id, bus=d.bus, cost=d.cost, alpha=disco.offer.alpha[i], energy_mwh=disco.energy[d.id],
                 profit_eur=float(gains[i]), payment_eur=disco.payments[d.id])
            for i, d in enumerate(scenario.dgs)]


def case_report(scenario: Scenario, mode: str, disco: DiscoSolution, status: str, computation: Dict,
                baseline: Optional[DiscoSolution] = None, equilibrium: Optional[EpecSolution] = None) -> CaseReport:
    report = CaseReport(label=scenario.label, mode=mode, status=status, notes=scenario.notes,
                        prices=list(scenario.prices), hours=list(scenario.hours))
    if disco is not None:
        report.dg = dg_rows(scenario, disco)
        report.disco = disco_summary(disco)
    if baseline is not None:
        report.baseline = disco_summary(baseline)
        if disco is not None and baseline.annual_loss_mwh > 0:
            report.disco['loss_change_pct'] = 100. * (disco.annual_loss_mwh / baseline.annual_loss_mwh - 1.)
    report.computation = dict(computation)
    if equilibrium is not None:
        report.attempts = [a.record() for a in equilibrium.attempts]
        report.distinct = [list(map(float, d)) for d in equilibrium.distinct]
    return _rounded_floats(report)


def _rounded_floats(report):
    # plain floats only; rounding happens in the tables
    return CaseReport.from_dict(_plain(asdict(report)))


def percent_changes(base: CaseReport, other: CaseReport):
    """Per unit: contract price change and profit change (%) from ``base`` to ``other``."""
    rows = []
    others = {r['id']: r for r in other.dg}
    for r in base.dg:
        o = others.get(r['id'])
        if o is None:
            continue
        rows.append(dict(id=r['id'],
                         price_change_pct=_pct(r['alpha'], o['alpha']),
                         profit_change_pct=_pct(r['profit_eur'], o['profit_eur'])))
    return rows


def _pct(a, b):
    return float(100. * (b - a) / abs(a)) if a else float('nan')


def competition_impact(competition: CaseReport, owner: CaseReport, deviation: List = ()):
    """Single owner against competition: total profit, DisCo payment, loss and unilateral gains."""
    impact = dict(
        total_profit_competition=float(sum(r['profit_eur'] for r in competition.dg)),
        total_profit_owner=float(sum(r['profit_eur'] for r in owner.dg)),
        payment_competition=float(competition.disco.get('payment_eur', 0.)),
        payment_owner=float(owner.disco.get('payment_eur', 0.)),
        loss_competition=float(competition.disco.get('loss_mwh', 0.)),
        loss_owner=float(owner.disco.get('loss_mwh', 0.)),
        price_and_profit_changes=percent_changes(competition, owner),
    )
    impact['deviation'] = [dict(id=competition.dg[g.dg]['id'] if g.dg < len(competition.dg) else str(g.dg),
                                alpha=g.alpha, best_alpha=g.best_alpha, profit_eur=g.profit,
                                best_profit_eur=g.best_profit, gain_pct=100. * g.relative_gain)
                           for g in deviation]
    return _plain(impact)


# ---------------------------------------------------------------------------
# audit


@dataclass
class IdentityCheck:
    name: str
    lhs: float
    rhs: float
    rel_error: float
    passed: bool


@dataclass
class AuditResult:
    checks: List[IdentityCheck]

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def worst(self):
        return max((c.rel_error for c in self.checks), default=0.)

    def to_frame(self):
        return pd.DataFrame([asdict(c) for c in self.checks])


def _identity(name, lhs, rhs, rtol):
    lhs, rhs = float(lhs), float(rhs)
    scale = max(abs(lhs), abs(rhs))
    rel = abs(lhs - rhs) / scale if scale > 0 else 0.
    return IdentityCheck(name, lhs, rhs, rel, rel <= rtol)


def audit(report: CaseReport, rtol=AUDIT_RTOL) -> AuditResult:
    """Internal arithmetic of a report: profits, payments and sums across tables."""
    checks = []
    for r in report.dg:
        checks.append(_identity(f'profit {r["id"]} = (alpha - cost) * energy', r['profit_eur'],
                                (r['alpha'] - r['cost']) * r['energy_mwh'], rtol))
        if 'payment_eur' in r:
            checks.append(_identity(f'payment {r["id"]} = alpha * energy', r['payment_eur'],
                                    r['alpha'] * r['energy_mwh'], rtol))
    d = report.disco
    if d.get('market_payment_by_period') is not None and 'market_payment_eur' in d:
        checks.append(_identity('market payment = sum over price levels', d['market_payment_eur'],
                                sum(d['market_payment_by_period']), rtol))
    if d.get('market_energy_by_period') and report.prices and \
            len(d['market_energy_by_period']) == len(report.prices):
        for t, (e, p, pay) in enumerate(zip(d['market_energy_by_period'], report.prices,
                                            d.get('market_payment_by_period') or [])):
            checks.append(_identity(f'market payment period {t} = price * energy', pay, p * e, rtol))
    if 'payment_eur' in d and 'market_payment_eur' in d and all('payment_eur' in r for r in report.dg):
        checks.append(_identity('DisCo payment = market + DG payments', d['payment_eur'],
                                d['market_payment_eur'] + sum(r['payment_eur'] for r in report.dg), rtol))
    result = AuditResult(checks)
    for c in checks:
        if not c.passed:
            logger.warning('audit: %s off by %.3f%%', c.name, 100. * c.rel_error)
    return result


# ---------------------------------------------------------------------------
# files


def dg_table(report: CaseReport) -> pd.DataFrame:
    """Contract prices to cents, euros and MWh to integers."""
    rows = [dict(dg=r['id'], bus=r['bus'], alpha_eur_mwh=round(r['alpha'], 2), energy_mwh=int(round(r['energy_mwh'])),
                 profit_eur=int(round(r['profit_eur'])), payment_eur=int(round(r['payment_eur'])))
            for r in report.dg]
    return pd.DataFrame(rows, columns=['dg', 'bus', 'alpha_eur_mwh', 'energy_mwh', 'profit_eur', 'payment_eur'])


def disco_table(report: CaseReport) -> pd.DataFrame:
    rows = []

    def add(label, with_dg, without):
        rows.append(dict(item=label, with_dg=None if with_dg is None else int(round(with_dg)),
                         without_dg=None if without is None else int(round(without))))

    base = report.baseline or {}
    d = report.disco
    for t, p in enumerate(report.prices):
        add(f'market purchase at {p:g} EUR/MWh', _at(d.get('market_payment_by_period'), t),
            _at(base.get('market_payment_by_period'), t))
    add('market payment', d.get('market_payment_eur'), base.get('market_payment_eur'))
    for r in report.dg:
        add(f'payment to {r["id"]}', r['payment_eur'], None)
    add('total DisCo payment', d.get('payment_eur'), base.get('payment_eur'))
    add('loss (MWh)', d.get('loss_mwh'), base.get('loss_mwh'))
    return pd.DataFrame(rows)


def _at(values, t):
    return values[t] if values is not None and t < len(values) else None


def computation_table(report: CaseReport) -> pd.DataFrame:
    return pd.DataFrame([dict(quantity=k, value=v) for k, v in report.computation.items()])


def write_case_report(report: CaseReport, out_dir) -> Dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = dict(report=os.path.join(out_dir, 'report.yaml'), dg=os.path.join(out_dir, 'dg.csv'),
                 disco=os.path.join(out_dir, 'disco.csv'), computation=os.path.join(out_dir, 'computation.csv'))
    with open(paths['report'], 'w') as f:
        yaml.safe_dump(report.to_dict(), f, sort_keys=False)
    dg_table(report).to_csv(paths['dg'], index=False)
    disco_table(report).to_csv(paths['disco'], index=False)
    computation_table(report).to_csv(paths['computation'], index=False)
    logger.info('report written to %s', out_dir)
    return paths


def load_case_report(path) -> CaseReport:
    if os.path.isdir(path):
        path = os.path.join(path, 'report.yaml')
    with open(path) as f:
        return CaseReport.from_dict(yaml.safe_load(f))
