"""The DisCo follower: multi-period cost-minimal purchase from the market and the DG units.

    min  sum_t hours_t (beta_t P_sb(t) + sum_i alpha_i P_dg_i(t))
    s.t. nodal balance with the approximate line flows,
         line limits, voltage limits, substation limits, DG limits.

Inside the optimization the objective is divided by ``price_scale * sum(hours)`` and
carries period weights ``hours_t / sum(hours)``; every € figure leaves this module
unscaled.  Duals are kept in the scaled units and the scale is recorded on ``DualSet``.
"""
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from ContractPricing.common import get_logger, ContractViolation, InfeasiblePeriodError, SolverFailure
from ContractPricing.model import Scenario
from ContractPricing.nlpcore import NlpOptions, NlpSolution, multistart_solve, poly_problem, INFEASIBLE
from ContractPricing.poly import Layout, Poly2, Poly2Builder
from ContractPricing.powerflow import VoltageProfile, branch_flows, total_loss

logger = get_logger('ContractPricing.disco')

PRICE_SCALE = 100.
TIE_TOL = 1e-6
FIXED_TOL = 1e-9


@dataclass(frozen=True)
class ContractOffer:
    alpha: Tuple[float, ...]

    def __post_init__(self):
        alpha = tuple(float(a) for a in np.atleast_1d(np.asarray(self.alpha, dtype=float)))
        if any(not (np.isfinite(a) and a >= 0) for a in alpha):
            raise ContractViolation(f'contract prices must be finite and nonnegative, got {alpha}')
        object.__setattr__(self, 'alpha', alpha)

    def __len__(self):
        return len(self.alpha)

    def as_array(self):
        return np.array(self.alpha, dtype=float)

    def replaced(self, i, value):
        alpha = list(self.alpha)
        alpha[i] = value
        return ContractOffer(tuple(alpha))

    @classmethod
    def uniform(cls, n, value):
        return cls((float(value),) * n)


def tie_flags(offer: ContractOffer, tol=TIE_TOL):
    """Index pairs of units whose prices coincide within ``tol``."""
    a = offer.as_array()
    return [(i, j) for i in range(len(a)) for j in range(i + 1, len(a)) if abs(a[i] - a[j]) < tol]


@dataclass
class Dispatch:
    p_dg: np.ndarray  # (n_dg, T) MW
    p_sb: np.ndarray  # (T,) MW
    v: VoltageProfile


@dataclass
class DualSet:
    lam: np.ndarray         # (n_bus, T), free
    lam_fixed: np.ndarray   # (n_pinned, T), free
    mu_line_hi: np.ndarray  # (n_line, T)
    mu_line_lo: np.ndarray
    mu_v_hi: np.ndarray     # (n_bus, T)
    mu_v_lo: np.ndarray
    mu_sb_hi: np.ndarray    # (T,)
    mu_sb_lo: np.ndarray
    mu_dg_hi: np.ndarray    # (n_dg, T)
    mu_dg_lo: np.ndarray
    scale: float = PRICE_SCALE
    weights: np.ndarray = None

    def min_mu(self):
        mus = [self.mu_line_hi, self.mu_line_lo, self.mu_v_hi, self.mu_v_lo, self.mu_sb_hi, self.mu_sb_lo,
               self.mu_dg_hi, self.mu_dg_lo]
        return min((float(np.min(m)) for m in mus if np.size(m)), default=0.)


@dataclass
class DiscoSolution:
    scenario: Scenario
    offer: ContractOffer
    dispatch: Dispatch
    duals: Optional[DualSet]
    objective: float                     # €
    payments: Dict[str, float]           # € per supplier ('market' and each DG id)
    energy: Dict[str, float]             # MWh per supplier
    market_payment_by_period: np.ndarray  # €
    market_energy_by_period: np.ndarray   # MWh
    loss_mw: np.ndarray                  # per period
    loss_mwh: np.ndarray                 # per period
    line_limits: bool = True
    nlp: List[NlpSolution] = field(default_factory=list)
    wall_seconds: float = 0.

    @property
    def annual_loss_mwh(self):
        return float(np.sum(self.loss_mwh))

    @property
    def iters(self):
        return int(sum(s.iters for s in self.nlp))

    def dg_energy(self):
        return np.array([self.energy[d.id] for d in self.scenario.dgs])

    def lmp(self):
        """Locational marginal prices in €/MWh, shape (n_bus, T)."""
        if self.duals is None:
            raise ContractViolation('solution carries no duals')
        d = self.duals
        return -d.lam * d.scale / (d.weights[None, :] * self.scenario.network.base_mva)


# ---------------------------------------------------------------------------
# model rows


class LowerLevel:
    """Follower objective, balance rows, inequality rows and stationarity as ``Poly2`` systems.

    The follower variables ``w`` (per period: bus voltages, DG outputs in MW, substation
    import in p.u.) are allocated in ``layout`` on construction.  Contract prices are
    constants from ``offer`` except for units listed in ``alpha_cols``, whose price is
    the layout column given there.  Build the systems only after the layout is complete.
    """
    def __init__(self, scenario: Scenario, layout: Layout, offer: Optional[ContractOffer] = None,
                 alpha_cols: Optional[Dict[int, int]] = None, line_limits=True, weights=None,
                 price_scale=PRICE_SCALE):
        self.sc = scenario
        self.net = scenario.network
        self.layout = layout
        self.alpha_cols = dict(alpha_cols or {})
        self.alpha = offer.as_array() if offer is not None else np.zeros(scenario.n_dg)
        if len(self.alpha) != scenario.n_dg:
            raise ContractViolation(f'offer has {len(self.alpha)} prices for {scenario.n_dg} units')
        self.line_limits = line_limits
        self.price_scale = price_scale
        hours = scenario.hours
        self.weights = hours / hours.sum() if weights is None else np.asarray(weights, dtype=float)
        self.T = scenario.n_period
        self.n_bus, self.n_dg, self.n_line = self.net.n_bus, scenario.n_dg, self.net.n_line
        self.pinned = [k for k, b in enumerate(self.net.buses) if b.v_fixed is not None]
        # units without an output range get an equality row instead of two limits
        self.fixed = [i for i, d in enumerate(scenario.dgs) if d.p_max - d.p_min <= FIXED_TOL]
        self.free = [i for i in range(self.n_dg) if i not in self.fixed]
        self.per_t = self.n_bus + self.n_dg + 1
        self.n_eq_t = self.n_bus + len(self.pinned) + len(self.fixed)
        self.m_t = (2 * self.n_line if line_limits else 0) + 2 * self.n_bus + 2 + 2 * len(self.free)
        labels = []
        for t in range(self.T):
            labels += [f'V[{b}][{t}]' for b in self.net.bus_ids]
            labels += [f'P_dg[{d.id}][{t}]' for d in scenario.dgs]
            labels += [f'P_sb[{t}]']
        self.w = layout.add('w', self.per_t * self.T, labels)
        self.lam = self.mu = None

    # ---- columns

    @property
    def n_w(self):
        return len(self.w)

    @property
    def n_eq(self):
        return self.n_eq_t * self.T

    @property
    def m(self):
        return self.m_t * self.T

    def v_col(self, k, t):
        return int(self.w[t * self.per_t + k])

    def dg_col(self, i, t):
        return int(self.w[t * self.per_t + self.n_bus + i])

    def sb_col(self, t):
        return int(self.w[t * self.per_t + self.n_bus + self.n_dg])

    def w_kinds(self):
        """'v' / 'dg' / 'sb' for every entry of ``w``."""
        one = ['v'] * self.n_bus + ['dg'] * self.n_dg + ['sb']
        return np.array(one * self.T)

    def add_duals(self):
        self.lam = self.layout.add('lam', self.n_eq, [f'lambda:{s}' for s in self.eq_names()])
        self.mu = self.layout.add('mu', self.m, [f'mu:{s}' for s in self.ineq_names()])
        return self.lam, self.mu

    def eq_names(self):
        names = []
        for t in range(self.T):
            names += [f'balance[{b}][{t}]' for b in self.net.bus_ids]
            names += [f'pinned[{self.net.buses[k].id}][{t}]' for k in self.pinned]
            names += [f'fixed[{self.sc.dgs[i].id}][{t}]' for i in self.fixed]
        return names

    def ineq_names(self):
        net, names = self.net, []
        lines = [f'{l.frm}-{l.to}' for l in net.lines]
        for t in range(self.T):
            if self.line_limits:
                names += [f'line_hi[{l}][{t}]' for l in lines] + [f'line_lo[{l}][{t}]' for l in lines]
            names += [f'v_hi[{b}][{t}]' for b in net.bus_ids] + [f'v_lo[{b}][{t}]' for b in net.bus_ids]
            names += [f'sb_hi[{t}]', f'sb_lo[{t}]']
            ids = [self.sc.dgs[i].id for i in self.free]
            names += [f'dg_hi[{d}][{t}]' for d in ids] + [f'dg_lo[{d}][{t}]' for d in ids]
        return names

    # ---- systems

    def objective(self) -> Poly2:
        b = Poly2Builder(self.layout.n)
        r = b.row()
        base = self.net.base_mva
        for t, p in enumerate(self.sc.periods):
            c = self.weights[t] / self.price_scale
            b.lin(r, self.sb_col(t), c * p.market_price * base)
            for i in range(self.n_dg):
                if i in self.alpha_cols:
                    b.quad(r, self.alpha_cols[i], self.dg_col(i, t), c)
                else:
                    b.lin(r, self.dg_col(i, t), c * self.alpha[i])
        return b.build()

    def balance(self) -> Poly2:
        b = Poly2Builder(self.layout.n)
        net = self.net
        frm, to, z = net.line_ends()
        dg_bus = self.sc.dg_bus_indices()
        demand = self.sc.demand_matrix()
        for t in range(self.T):
            rows = [b.row(demand[k, t]) for k in range(self.n_bus)]
            b.lin(rows[net.sb_index], self.sb_col(t), -1.)
            for i in range(self.n_dg):
                b.lin(rows[dg_bus[i]], self.dg_col(i, t), -1. / net.base_mva)
            for a, c, zz in zip(frm, to, z):
                va, vc = self.v_col(a, t), self.v_col(c, t)
                b.quad(rows[a], va, va, 1. / zz)
                b.quad(rows[a], va, vc, -1. / zz)
                b.quad(rows[c], vc, vc, 1. / zz)
                b.quad(rows[c], va, vc, -1. / zz)
            for k in self.pinned:
                r = b.row(-net.buses[k].v_fixed)
                b.lin(r, self.v_col(k, t), 1.)
            for i in self.fixed:
                b.lin(b.row(-self.sc.dgs[i].p_max), self.dg_col(i, t), 1.)
        return b.build()

    def inequalities(self) -> Poly2:
        b = Poly2Builder(self.layout.n)
        net = self.net
        frm, to, z = net.line_ends()
        p_max = [l.p_max for l in net.lines]
        v_min, v_max = net.v_limits()
        sb = net.substation
        for t in range(self.T):
            if self.line_limits:
                for a, c, zz, pm in zip(frm, to, z, p_max):
                    r = b.row(pm)
                    va, vc = self.v_col(a, t), self.v_col(c, t)
                    b.quad(r, va, va, -1. / zz)
                    b.quad(r, va, vc, 1. / zz)
                for a, c, zz, pm in zip(frm, to, z, p_max):
                    r = b.row(pm)
                    va, vc = self.v_col(a, t), self.v_col(c, t)
                    b.quad(r, va, va, 1. / zz)
                    b.quad(r, va, vc, -1. / zz)
            for k in range(self.n_bus):
                b.lin(b.row(v_max[k]), self.v_col(k, t), -1.)
            for k in range(self.n_bus):
                b.lin(b.row(-v_min[k]), self.v_col(k, t), 1.)
            b.lin(b.row(sb.p_max), self.sb_col(t), -1.)
            b.lin(b.row(-sb.p_min), self.sb_col(t), 1.)
            for i in self.free:
                b.lin(b.row(self.sc.dgs[i].p_max), self.dg_col(i, t), -1.)
            for i in self.free:
                b.lin(b.row(-self.sc.dgs[i].p_min), self.dg_col(i, t), 1.)
        return b.build()

    def stationarity(self) -> Poly2:
        """Gradient of the follower Lagrangian f - lam^T balance - mu^T ineq with respect to ``w``."""
        assert self.lam is not None, 'call add_duals first'
        return self.objective().gradient_rows(self.w) - self.balance().weighted_grad(self.lam, self.w) \
            - self.inequalities().weighted_grad(self.mu, self.w)

    # ---- conversions

    def start_w(self):
        w = np.zeros(self.n_w)
        demand = self.sc.demand_matrix()
        sb = self.net.substation
        for t in range(self.T):
            off = t * self.per_t
            w[off:off + self.n_bus] = [b.v_fixed if b.v_fixed is not None else 1. for b in self.net.buses]
            for i, d in enumerate(self.sc.dgs):
                w[off + self.n_bus + i] = 0.5 * (d.p_min + d.p_max)
            dg_pu = sum(0.5 * (d.p_min + d.p_max) for d in self.sc.dgs) / self.net.base_mva
            w[off + self.n_bus + self.n_dg] = np.clip(demand[:, t].sum() - dg_pu, sb.p_min, sb.p_max)
        return w

    def dispatch_from_w(self, w) -> Dispatch:
        blocks = np.asarray(w, dtype=float).reshape(self.T, self.per_t)
        v = blocks[:, :self.n_bus].T
        p_dg = blocks[:, self.n_bus:self.n_bus + self.n_dg].T.copy()
        p_sb = blocks[:, -1] * self.net.base_mva
        return Dispatch(p_dg=p_dg, p_sb=p_sb, v=VoltageProfile(np.maximum(v, 1e-12)))

    def w_from_dispatch(self, dispatch: Dispatch):
        blocks = np.zeros((self.T, self.per_t))
        blocks[:, :self.n_bus] = dispatch.v.v.T
        blocks[:, self.n_bus:self.n_bus + self.n_dg] = np.asarray(dispatch.p_dg).reshape(self.n_dg, self.T).T
        blocks[:, -1] = np.asarray(dispatch.p_sb) / self.net.base_mva
        return blocks.reshape(-1)

    def duals_from_flat(self, lam, mu, scale_by=None) -> DualSet:
        lam = np.asarray(lam, dtype=float).reshape(self.T, self.n_eq_t)
        mu = np.asarray(mu, dtype=float).reshape(self.T, self.m_t)
        if scale_by is not None:
            lam = lam * np.asarray(scale_by)[:, None]
            mu = mu * np.asarray(scale_by)[:, None]
        nb, nl, nf = self.n_bus, self.n_line if self.line_limits else 0, len(self.free)
        n_pin = len(self.pinned)
        cuts = np.cumsum([nl, nl, nb, nb, 1, 1, nf, nf])
        parts = np.split(mu, cuts[:-1], axis=1)
        mu_dg_hi, mu_dg_lo = np.zeros((self.n_dg, self.T)), np.zeros((self.n_dg, self.T))
        mu_dg_hi[self.free], mu_dg_lo[self.free] = parts[6].T, parts[7].T
        # a fixed unit's equality multiplier is the difference of its two limit multipliers
        lam_dg = lam[:, nb + n_pin:].T
        mu_dg_lo[self.fixed], mu_dg_hi[self.fixed] = np.maximum(lam_dg, 0.), np.maximum(-lam_dg, 0.)
        return DualSet(lam=lam[:, :nb].T.copy(), lam_fixed=lam[:, nb:nb + n_pin].T.copy(),
                       mu_line_hi=parts[0].T.copy(), mu_line_lo=parts[1].T.copy(),
                       mu_v_hi=parts[2].T.copy(), mu_v_lo=parts[3].T.copy(),
                       mu_sb_hi=parts[4][:, 0].copy(), mu_sb_lo=parts[5][:, 0].copy(),
                       mu_dg_hi=mu_dg_hi, mu_dg_lo=mu_dg_lo, scale=self.price_scale, weights=self.weights.copy())

    def flat_duals(self, duals: DualSet):
        lam_dg = (duals.mu_dg_lo - duals.mu_dg_hi)[self.fixed]
        lam = np.concatenate([duals.lam.T, duals.lam_fixed.T, lam_dg.T], axis=1).reshape(-1)
        mu = np.concatenate([duals.mu_line_hi.T, duals.mu_line_lo.T,
                             duals.mu_v_hi.T, duals.mu_v_lo.T, duals.mu_sb_hi[:, None], duals.mu_sb_lo[:, None],
                             duals.mu_dg_hi[self.free].T, duals.mu_dg_lo[self.free].T], axis=1).reshape(-1)
        return lam, mu


# ---------------------------------------------------------------------------
# operations


def _check_offer(scenario: Scenario, offer: ContractOffer):
    if len(offer) != scenario.n_dg:
        raise ContractViolation(f'offer has {len(offer)} prices for {scenario.n_dg} units')


def build_opf(scenario: Scenario, offer: ContractOffer, line_limits=True, weights=None):
    """The follower as an ``NlpProblem`` over ``w`` (monolithic over all periods)."""
    _check_offer(scenario, offer)
    layout = Layout()
    lower = LowerLevel(scenario, layout, offer, line_limits=line_limits, weights=weights)
    n = layout.n
    problem = poly_problem(lower.objective(), lower.balance(), lower.inequalities(),
                           np.full(n, -np.inf), np.full(n, np.inf), x0=lower.start_w(), names=layout.labels,
                           eq_names=lower.eq_names(), ineq_names=lower.ineq_names(),
                           label=f'disco {scenario.label}'.strip())
    return problem, lower


def assemble_solution(scenario: Scenario, offer: ContractOffer, dispatch: Dispatch, duals: Optional[DualSet] = None,
                      line_limits=True, nlp=(), wall_seconds=0.) -> DiscoSolution:
    """Monetary and energy bookkeeping of a dispatch."""
    hours = scenario.hours
    prices = scenario.prices
    alpha = offer.as_array()
    p_dg = np.asarray(dispatch.p_dg, dtype=float).reshape(scenario.n_dg, scenario.n_period)
    p_sb = np.asarray(dispatch.p_sb, dtype=float).reshape(scenario.n_period)
    market_energy = hours * p_sb
    market_payment = prices * market_energy
    dg_energy = p_dg @ hours
    payments = {'market': float(market_payment.sum())}
    energy = {'market': float(market_energy.sum())}
    for i, d in enumerate(scenario.dgs):
        payments[d.id] = float(alpha[i] * dg_energy[i])
        energy[d.id] = float(dg_energy[i])
    loss_mw = total_loss(scenario.network, dispatch.v.v) * scenario.network.base_mva
    return DiscoSolution(scenario=scenario, offer=offer, dispatch=dispatch, duals=duals,
                         objective=float(sum(payments.values())), payments=payments, energy=energy,
                         market_payment_by_period=market_payment, market_energy_by_period=market_energy,
                         loss_mw=loss_mw, loss_mwh=loss_mw * hours, line_limits=line_limits, nlp=list(nlp),
                         wall_seconds=wall_seconds)


def deliverable_shortfall(scenario: Scenario):
    """Per period: total demand minus the most the substation and DG units can inject (p.u.); > 0 is infeasible."""
    net = scenario.network
    cap = net.substation.p_max + sum(d.p_max for d in scenario.dgs) / net.base_mva
    return scenario.demand_matrix().sum(axis=0) - cap


def _solve_period(scenario, offer, t, options, line_limits):
    sub = scenario.single_period(t)
    problem, lower = build_opf(sub, offer, line_limits=line_limits, weights=np.ones(1))
    problem.label = f'{problem.label} period {t}'
    result = multistart_solve(problem, options)
    return result.best, lower


def solve_disco(scenario: Scenario, offer: ContractOffer, options: NlpOptions = None, line_limits=True,
                monolithic=False, workers=None) -> DiscoSolution:
    """Cost-minimal dispatch for fixed contract prices.

    Periods are independent given the prices and are solved concurrently as separate
    problems unless ``monolithic`` is set.  Raises ``InfeasiblePeriodError`` for a period
    whose demand cannot be served and ``SolverFailure`` for any other unsolved period.
    """
    _check_offer(scenario, offer)
    options = options or NlpOptions()
    t0 = time.time()
    short = deliverable_shortfall(scenario)
    if np.any(short > 0):
        raise InfeasiblePeriodError(int(np.flatnonzero(short > 0)[0]))

    full_layout = Layout()
    full = LowerLevel(scenario, full_layout, offer, line_limits=line_limits)
    if monolithic:
        problem, _ = build_opf(scenario, offer, line_limits=line_limits)
        best = multistart_solve(problem, options).best
        if not best.solved:
            if best.status == INFEASIBLE:
                raise InfeasiblePeriodError(0, best)
            raise SolverFailure(problem.label, best)
        w, lam, mu, nlps = best.x, best.lambda_eq, best.mu_ineq, [best]
        duals = full.duals_from_flat(lam, mu)
    else:
        T = scenario.n_period
        with ThreadPoolExecutor(max_workers=workers or min(T, 8)) as pool:
            results = list(pool.map(lambda t: _solve_period(scenario, offer, t, options, line_limits), range(T)))
        nlps = [r[0] for r in results]
        for t, sol in enumerate(nlps):
            if not sol.solved:
                if sol.status == INFEASIBLE:
                    raise InfeasiblePeriodError(t, sol)
                raise SolverFailure(f'DisCo period {t}', sol)
        w = np.concatenate([s.x for s in nlps])
        lam = np.concatenate([s.lambda_eq for s in nlps])
        mu = np.concatenate([s.mu_ineq for s in nlps])
        # per-period problems carry weight 1; rescale their duals to the joint weights
        duals = full.duals_from_flat(lam, mu, scale_by=full.weights)
    solution = assemble_solution(scenario, offer, full.dispatch_from_w(w), duals, line_limits, nlps,
                                 time.time() - t0)
    logger.debug('disco %s: alpha=%s objective=%.2f EUR, %d iterations', scenario.label, offer.alpha,
                 solution.objective, solution.iters)
    return solution


def no_dg_baseline(scenario: Scenario, options: NlpOptions = None, line_limits=True) -> DiscoSolution:
    """The same scenario served without any DG unit."""
    return solve_disco(scenario.with_dgs([], label=f'{scenario.label} without DG'), ContractOffer(()), options,
                       line_limits=line_limits)


def kkt_check(scenario: Scenario, offer: ContractOffer, solution: DiscoSolution) -> Dict[str, float]:
    """Infinity norms of the follower KKT families at ``solution`` (scaled units)."""
    _check_offer(scenario, offer)
    if solution.duals is None:
        raise ContractViolation('solution carries no duals')
    layout = Layout()
    lower = LowerLevel(scenario, layout, offer, line_limits=solution.line_limits)
    lower.add_duals()
    lam, mu = lower.flat_duals(solution.duals)
    w = lower.w_from_dispatch(solution.dispatch)
    x = np.concatenate([w, lam, mu])
    assert x.shape == (layout.n,)
    r = lower.stationarity().evaluate(x)
    kinds = lower.w_kinds()
    balance = lower.balance().evaluate(x)
    n_bus = lower.n_bus
    is_balance = np.tile(np.arange(lower.n_eq_t) < n_bus, lower.T)
    g = lower.inequalities().evaluate(x)

    def norm(v):
        return float(np.max(np.abs(v))) if np.size(v) else 0.

    return {
        'stationarity_v': norm(r[kinds == 'v']),
        'stationarity_dg': norm(r[kinds == 'dg']),
        'stationarity_sb': norm(r[kinds == 'sb']),
        'balance': norm(balance[is_balance]),
        'pinned': norm(balance[~is_balance]),
        'primal_ineq': norm(np.minimum(g, 0.)),
        'dual_sign': norm(np.minimum(mu, 0.)),
        'complementarity': norm(mu * g),
    }


def payment_report(scenario: Scenario, solution: DiscoSolution) -> pd.DataFrame:
    """Payment, energy and loss rows: market purchase per period, each DG, totals and network loss."""
    rows = []
    for t, p in enumerate(scenario.periods):
        rows.append(dict(item=f'market at {p.market_price:g} EUR/MWh', period=t,
                         price_eur_mwh=p.market_price, energy_mwh=solution.market_energy_by_period[t],
                         payment_eur=solution.market_payment_by_period[t]))
    rows.append(dict(item='market', period=-1, price_eur_mwh=np.nan, energy_mwh=solution.energy['market'],
                     payment_eur=solution.payments['market']))
    for i, d in enumerate(scenario.dgs):
        rows.append(dict(item=d.id, period=-1, price_eur_mwh=solution.offer.alpha[i],
                         energy_mwh=solution.energy[d.id], payment_eur=solution.payments[d.id]))
    rows.append(dict(item='total', period=-1, price_eur_mwh=np.nan, energy_mwh=float(sum(solution.energy.values())),
                     payment_eur=solution.objective))
    rows.append(dict(item='loss', period=-1, price_eur_mwh=np.nan, energy_mwh=solution.annual_loss_mwh,
                     payment_eur=np.nan))
    return pd.DataFrame(rows)


def line_loading(scenario: Scenario, solution: DiscoSolution) -> pd.DataFrame:
    """Directed line flows (MW) per period."""
    ft, tf = branch_flows(scenario.network, solution.dispatch.v.v)
    base = scenario.network.base_mva
    rows = []
    for j, l in enumerate(scenario.network.lines):
        for t in range(scenario.n_period):
            rows.append(dict(line=f'{l.frm}-{l.to}', period=t, flow_mw=ft[j, t] * base,
                             loss_mw=(ft[j, t] + tf[j, t]) * base, limit_mw=l.p_max * base))
    return pd.DataFrame(rows)
