"""Checks that a price vector is an equilibrium.

* ``diagonalize``: Gauss-Seidel best responses, each unit solving its own MPEC with the
  rivals fixed, until a sweep no longer moves the prices.
* ``sweep_profit``: unilateral deviation of one unit over a price grid with the DisCo
  re-dispatching at every point.
* ``resolve_check``: fresh DisCo solve at the equilibrium prices compared with the
  follower solution embedded in the equilibrium.
"""
import time
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from ContractPricing.common import get_logger, progress_disabled, ContractPricingError
from ContractPricing.disco import ContractOffer, DiscoSolution, solve_disco
from ContractPricing.epec import EpecOptions, EpecSolution, active_units, build_mpec, price_grid, profit, \
    profit_curve, solve_mpec
from ContractPricing.model import Scenario
from ContractPricing.nlpcore import NlpOptions

logger = get_logger('ContractPricing.verify')

NASH_RTOL = 1e-3
RESOLVE_RTOL = 1e-3
CYCLE_WINDOW = 20


@dataclass
class DiagonalizationTrace:
    sweeps: List[np.ndarray] = field(default_factory=list)
    converged: bool = False
    cycle_detected: bool = False
    failed: bool = False
    failed_at: Optional[str] = None
    accuracy: float = float('inf')
    iters: int = 0
    wall_seconds: float = 0.

    @property
    def n_sweeps(self):
        return len(self.sweeps)

    def to_frame(self, ids=None):
        ids = ids or [f'DG{i + 1}' for i in range(len(self.sweeps[0]) if self.sweeps else 0)]
        rows = [dict(sweep=k + 1, **{f'alpha_{d}': float(a) for d, a in zip(ids, vec)})
                for k, vec in enumerate(self.sweeps)]
        return pd.DataFrame(rows)


def diagonalize(scenario: Scenario, start: ContractOffer, tol=1e-6, max_sweeps=50, options: EpecOptions = None,
                cycle_window=CYCLE_WINDOW):
    """Gauss-Seidel best-response iteration; returns ``(trace, final offer)``."""
    assert tol > 0, 'tol must be positive'
    options = options or EpecOptions()
    t0 = time.time()
    trace = DiagonalizationTrace()
    players = active_units(scenario)
    offer = start
    previous = start.as_array()
    history = [previous]
    for sweep in tqdm(range(max_sweeps), desc='diagonalization', disable=progress_disabled(options.verbose)):
        for i in players:
            try:
                disco = solve_disco(scenario, offer, options.disco, line_limits=options.line_limits)
            except ContractPricingError as e:
                logger.warning('sweep %d: DisCo solve for unit %s failed: %s', sweep + 1, scenario.dgs[i].id, e)
                trace.failed, trace.failed_at = True, scenario.dgs[i].id
                break
            result = solve_mpec(build_mpec(scenario, i, offer, options.line_limits, options.alpha_cap_factor),
                                disco, options)
            trace.iters += result.iters
            if not result.ok:
                logger.warning('sweep %d: MPEC of unit %s stopped with %s', sweep + 1, scenario.dgs[i].id,
                               result.nlp.status)
                trace.failed, trace.failed_at = True, scenario.dgs[i].id
                break
            offer = offer.replaced(i, float(result.alpha[0]))
        if trace.failed:
            break
        current = offer.as_array()
        trace.sweeps.append(current)
        trace.accuracy = float(np.max(np.abs(current - previous))) if len(current) else 0.
        logger.debug('sweep %d: alpha=%s accuracy=%.2e', sweep + 1, np.round(current, 6), trace.accuracy)
        if len(players) <= 1:
            # a lone player's best response does not depend on anything that moves
            trace.accuracy = 0.
        if trace.accuracy <= tol:
            trace.converged = True
            break
        if any(np.max(np.abs(current - h)) <= tol for h in history[-cycle_window:-1]):
            trace.cycle_detected = True
            logger.warning('diagonalization revisits an earlier price vector after %d sweeps', sweep + 1)
            break
        history.append(current)
        previous = current
    trace.wall_seconds = time.time() - t0
    logger.info('diagonalization %s: %s after %d sweeps, alpha=%s accuracy=%.2e', scenario.label,
                'converged' if trace.converged else 'cycle' if trace.cycle_detected else
                'failed' if trace.failed else 'not converged', trace.n_sweeps, np.round(offer.as_array(), 4),
                trace.accuracy)
    return trace, offer


@dataclass
class SweepCurve:
    dg: int
    alphas: np.ndarray
    profits: np.ndarray
    energies: np.ndarray
    failed: np.ndarray
    center: float

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=float)
        self.profits = np.asarray(self.profits, dtype=float)
        self.failed = np.asarray(self.failed, dtype=bool)
        assert len(self.alphas) == len(self.profits), 'grid and profits differ in length'
        assert np.all(np.diff(self.alphas) > 0), 'price grid must be increasing'

    @property
    def center_index(self):
        return int(np.argmin(np.abs(self.alphas - self.center)))

    def is_nash(self, rtol=NASH_RTOL):
        """Profit at the equilibrium price is within ``rtol`` of the best grid profit."""
        ok = ~self.failed
        if not ok[self.center_index]:
            return False
        p0 = self.profits[self.center_index]
        return bool(np.all(self.profits[ok] <= p0 + rtol * abs(p0)))

    def to_frame(self):
        return pd.DataFrame(dict(alpha_eur_mwh=self.alphas, profit_eur=self.profits, energy_mwh=self.energies,
                                 failed=self.failed))


def _offer_of(equilibrium: Union[EpecSolution, ContractOffer]) -> ContractOffer:
    return equilibrium.alpha if isinstance(equilibrium, EpecSolution) else equilibrium


def sweep_profit(scenario: Scenario, equilibrium: Union[EpecSolution, ContractOffer], dg: int, half_width=5.,
                 step=0.1, options: NlpOptions = None, line_limits=True) -> SweepCurve:
    """Profit of unit ``dg`` over a price grid around its equilibrium price, rivals fixed."""
    offer = _offer_of(equilibrium)
    center = offer.alpha[dg]
    grid = price_grid(center, half_width, step)
    profits, energies, failed = profit_curve(scenario, offer, dg, grid, options, line_limits)
    if failed.any():
        logger.warning('sweep of %s: %d grid points failed', scenario.dgs[dg].id, int(failed.sum()))
    return SweepCurve(dg, grid, profits, energies, failed, center)


@dataclass
class ResolveReport:
    passed: bool
    rows: pd.DataFrame
    resolved: Optional[DiscoSolution] = None
    message: str = ''

    @property
    def discrepancies(self):
        return self.rows[~self.rows['ok']] if len(self.rows) else self.rows


def _compare(rows, quantity, embedded, resolved, atol, rtol):
    for name, a, b in zip(quantity, np.ravel(embedded), np.ravel(resolved)):
        rel = abs(a - b) / max(abs(a), abs(b), atol)
        rows.append(dict(quantity=name, embedded=float(a), resolved=float(b), rel_diff=float(rel),
                         ok=bool(rel <= rtol)))


def resolve_check(scenario: Scenario, equilibrium: EpecSolution, options: NlpOptions = None, rtol=RESOLVE_RTOL,
                  line_limits=True) -> ResolveReport:
    """Fresh multistart DisCo solve at the equilibrium prices against the embedded follower solution."""
    embedded = equilibrium.disco
    if embedded is None:
        return ResolveReport(False, pd.DataFrame(), message='equilibrium carries no follower solution')
    options = options or NlpOptions(multistart=3)
    try:
        fresh = solve_disco(scenario, equilibrium.alpha, options, line_limits=line_limits)
    except ContractPricingError as e:
        return ResolveReport(False, pd.DataFrame(), message=f'DisCo solve failed: {e}')
    rows = []
    T = scenario.n_period
    _compare(rows, [f'P_dg[{d.id}][{t}]' for d in scenario.dgs for t in range(T)],
             embedded.dispatch.p_dg, fresh.dispatch.p_dg, 1e-3, rtol)
    _compare(rows, [f'P_sb[{t}]' for t in range(T)], embedded.dispatch.p_sb, fresh.dispatch.p_sb, 1e-3, rtol)
    _compare(rows, [f'payment[{k}]' for k in embedded.payments], list(embedded.payments.values()),
             [fresh.payments[k] for k in embedded.payments], 1., rtol)
    _compare(rows, [f'profit[{d.id}]' for d in scenario.dgs],
             profit(scenario, equilibrium.alpha, embedded.dispatch), profit(scenario, equilibrium.alpha,
                                                                            fresh.dispatch), 1., rtol)
    frame = pd.DataFrame(rows)
    passed = bool(frame['ok'].all()) if len(frame) else True
    if not passed:
        bad = frame[~frame['ok']]
        logger.warning('re-solve differs in %s', ', '.join(bad['quantity']))
    return ResolveReport(passed, frame, fresh)
