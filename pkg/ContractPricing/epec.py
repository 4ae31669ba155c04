"""Leader problems: each DG's MPEC, the stacked EPEC and the single-owner MPEC.

A DG unit chooses its contract price anticipating the DisCo's reaction.  The
follower is replaced by its KKT system in slack form,

    h_e  = [stationarity; balance] = 0,    h_in(w) - s = 0,
    0 <= mu,  0 <= s,  mu^T s <= 0,

and every leader's strong-stationarity conditions are written with their own
multipliers over the shared follower block.  The equilibrium problem minimizes

    C_pen = sum_i (sigma_i^T s + psi_i^T mu) + mu^T s

subject to all of them; C_pen = 0 at a feasible point means every complementarity
pair vanishes.  Grouping several units under one objective gives the
single-owner problem with the same machinery.
"""
import functools
import operator
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import lsq_linear
from tqdm import tqdm

from ContractPricing.common import get_logger, progress_disabled, rng_with_seed, ContractPricingError, \
    EquilibriumNotFound
from ContractPricing.disco import ContractOffer, DiscoSolution, LowerLevel, assemble_solution, kkt_check, \
    solve_disco, FIXED_TOL, PRICE_SCALE
from ContractPricing.metrics import get_writer
from ContractPricing.model import Scenario
from ContractPricing.nlpcore import NlpOptions, NlpProblem, NlpSolution, poly_problem, solve as nlp_solve, SOLVED
from ContractPricing.poly import Layout, Poly2

logger = get_logger('ContractPricing.epec')

ACCEPTED, NOT_FOUND = 'accepted', 'not_found'
MPEC_EPS = tuple(10. ** -k for k in range(2, 11))


@dataclass
class EpecOptions:
    epsilon_comp: float = 1e-6
    alpha_cap_factor: float = 10.
    starts: int = 8
    seed: int = 0
    line_limits: bool = True
    products_tol: float = 1e-8
    follower_tol: float = 1e-6
    distinct_tol: float = 1e-4
    nlp: NlpOptions = field(default_factory=lambda: NlpOptions(mu0=1e-2, max_iter=1000))
    disco: NlpOptions = field(default_factory=NlpOptions)
    mpec_eps: Tuple[float, ...] = MPEC_EPS
    writer_dir: Optional[str] = None
    verbose: bool = False


@dataclass
class SlackVector:
    s: np.ndarray
    names: List[str] = field(default_factory=list)

    def __post_init__(self):
        assert np.all(self.s >= -1e-12), 'slacks must be nonnegative'


@dataclass
class PrimalDualPoint:
    w: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    s: SlackVector

    @property
    def y1(self):
        return np.concatenate([self.w, self.lam])


@dataclass
class StationarityMultipliers:
    players: Tuple[int, ...]
    mu_bar: np.ndarray
    mu_under: np.ndarray
    phi: float
    sigma: np.ndarray
    psi: np.ndarray


def active_units(scenario: Scenario):
    """Units with an output range; units pinned at a fixed output cannot change what they sell and leave the game."""
    return tuple(i for i, d in enumerate(scenario.dgs) if d.p_max - d.p_min > FIXED_TOL)


def alpha_cap(scenario: Scenario, factor=10.):
    top = float(np.max(scenario.prices)) if scenario.n_period else 0.
    if top <= 0:
        top = max([d.cost for d in scenario.dgs] + [1.])
    return factor * top


def costs(scenario: Scenario):
    return np.array([d.cost for d in scenario.dgs], dtype=float)


def profit(scenario: Scenario, alpha, dispatch) -> np.ndarray:
    """Profit (€) of every unit: sum_t hours_t (alpha_i - c_i) P_dg_i(t)."""
    alpha = alpha.as_array() if isinstance(alpha, ContractOffer) else np.asarray(alpha, dtype=float)
    p_dg = dispatch.p_dg if hasattr(dispatch, 'p_dg') else dispatch
    p_dg = np.asarray(p_dg, dtype=float).reshape(scenario.n_dg, scenario.n_period)
    return (alpha - costs(scenario)) * (p_dg @ scenario.hours)


# ---------------------------------------------------------------------------
# MPEC systems


class MpecSystem:
    """Leader problem of ``players`` with the follower's KKT system embedded.

    Variables are laid out as ``alpha`` (one per player), ``w``, ``lam``, ``mu``, ``s``.
    Prices of non-players are the constants of ``offer``.
    """
    def __init__(self, scenario: Scenario, players: Sequence[int], offer: ContractOffer, line_limits=True,
                 cap_factor=10., price_scale=PRICE_SCALE):
        self.scenario = scenario
        self.players = tuple(int(i) for i in players)
        assert self.players, 'at least one player'
        self.offer = offer
        self.cap_factor = cap_factor
        self.cap = alpha_cap(scenario, cap_factor)
        self.price_scale = price_scale
        self.layout = Layout()
        self.alpha = self.layout.add('alpha', len(self.players), [f'alpha[{scenario.dgs[i].id}]' for i in self.players])
        self.lower = LowerLevel(scenario, self.layout, offer, alpha_cols=dict(zip(self.players, self.alpha)),
                                line_limits=line_limits, price_scale=price_scale)
        self.lower.add_duals()
        self.s = self.layout.add('s', self.lower.m, [f's:{n}' for n in self.lower.ineq_names()])
        self.n_core = self.layout.n
        self._build()

    @property
    def dg(self):
        return self.players[0] if len(self.players) == 1 else None

    @property
    def line_limits(self):
        return self.lower.line_limits

    def _build(self):
        n, lower = self.layout.n, self.lower
        self.h_e = Poly2.vstack([lower.stationarity(), lower.balance()])
        m = lower.m
        slack = Poly2(m, n, None, (np.arange(m), self.s, -np.ones(m)))
        self.h_in = lower.inequalities() + slack
        self.comp = Poly2(1, n, None, None, (np.zeros(m), lower.mu, self.s, np.ones(m)))
        self.comp_pairs = list(zip(self.s.tolist(), lower.mu.tolist()))

    def profit_poly(self, i, n=None) -> Poly2:
        """Scaled profit of unit ``i`` (a player): sum_t weight_t (alpha_i - c_i) P_dg_i(t) / price_scale."""
        n = self.layout.n if n is None else n
        lower = self.lower
        col = int(self.alpha[self.players.index(i)])
        c = self.scenario.dgs[i].cost
        T = lower.T
        dg = np.array([lower.dg_col(i, t) for t in range(T)])
        wts = lower.weights / self.price_scale
        return Poly2(1, n, None, (np.zeros(T), dg, -c * wts), (np.zeros(T), np.full(T, col), dg, wts))

    def objective(self, n=None) -> Poly2:
        return functools.reduce(operator.add, [self.profit_poly(i, n) for i in self.players])

    def bounds(self, n=None):
        n = self.layout.n if n is None else n
        lb, ub = np.full(n, -np.inf), np.full(n, np.inf)
        lb[self.alpha], ub[self.alpha] = 0., self.cap
        lb[self.lower.mu] = 0.
        lb[self.s] = 0.
        return lb, ub

    def full_offer(self, x) -> ContractOffer:
        alpha = self.offer.as_array()
        alpha[list(self.players)] = np.asarray(x)[self.alpha]
        return ContractOffer(tuple(np.maximum(alpha, 0.)))

    def start_point(self, disco: DiscoSolution, n=None):
        """Core variables completed from a DisCo solution at the players' current prices."""
        n = self.layout.n if n is None else n
        x = np.zeros(n)
        lower = self.lower
        x[self.alpha] = disco.offer.as_array()[list(self.players)]
        x[lower.w] = lower.w_from_dispatch(disco.dispatch)
        lam, mu = lower.flat_duals(disco.duals)
        x[lower.lam] = lam
        x[lower.mu] = np.maximum(mu, 0.)
        x[self.s] = np.maximum(lower.inequalities().evaluate(x), 0.)
        return x

    def point(self, x) -> PrimalDualPoint:
        lower = self.lower
        return PrimalDualPoint(w=x[lower.w].copy(), lam=x[lower.lam].copy(), mu=x[lower.mu].copy(),
                               s=SlackVector(np.maximum(x[self.s], 0.), lower.ineq_names()))

    def embedded_disco(self, x) -> DiscoSolution:
        lower = self.lower
        offer = self.full_offer(x)
        duals = lower.duals_from_flat(x[lower.lam], x[lower.mu])
        return assemble_solution(self.scenario, offer, lower.dispatch_from_w(x[lower.w]), duals, self.line_limits)


def build_mpec(scenario: Scenario, i: int, rivals: ContractOffer, line_limits=True, cap_factor=10.) -> MpecSystem:
    """Unit ``i``'s MPEC with every other price fixed at ``rivals`` (entry ``i`` is ignored)."""
    return MpecSystem(scenario, (i,), rivals, line_limits, cap_factor)


def build_single_owner_mpec(scenario: Scenario, line_limits=True, cap_factor=10.) -> MpecSystem:
    """One owner of every (active) unit maximizing the summed profit."""
    players = active_units(scenario)
    if not players:
        raise ContractPricingError('single-owner problem needs at least one unit with positive capacity')
    return MpecSystem(scenario, players, ContractOffer(tuple(costs(scenario))), line_limits, cap_factor)


def mpec_nlp(system: MpecSystem, eps: float) -> NlpProblem:
    """The players' MPEC with complementarity relaxed to mu^T s <= eps."""
    n = system.layout.n
    relax = Poly2(1, n, [eps]) - system.comp
    lb, ub = system.bounds()
    return poly_problem(-system.objective(), Poly2.vstack([system.h_e, system.h_in]), relax, lb, ub,
                        names=system.layout.labels, label=f'mpec {"+".join(str(p) for p in system.players)}')


@dataclass
class MpecResult:
    alpha: np.ndarray
    x: np.ndarray
    nlp: NlpSolution
    eps: float
    ok: bool
    iters: int
    polished: bool = False


def _polish_mpec(system: MpecSystem, x):
    """Active-set refinement of an MPEC point; core variables or None."""
    # EpecLayout appends multiplier blocks to the layout it is given, so work on a twin
    twin = MpecSystem(system.scenario, system.players, system.offer, system.line_limits, system.cap_factor,
                      system.price_scale)
    el = EpecLayout(twin, [system.players])
    y = np.zeros(el.n)
    y[:system.n_core] = x[:system.n_core]
    y = polish(el, el.fit_multipliers(y))
    if y is None or np.any(y[twin.alpha] >= twin.cap * (1. - 1e-6)):
        return None
    return y[:system.n_core]


def solve_mpec(system: MpecSystem, start: DiscoSolution, options: EpecOptions = None) -> MpecResult:
    """Relaxation sequence eps -> 0 of ``mpec_nlp``, each solve warm-started from the last one that solved.

    The last solved point is refined on its active set; the result is ``ok`` when the
    refinement succeeds or the relaxation got down to eps <= 1e-6.
    """
    options = options or EpecOptions()
    x = system.start_point(start)
    duals, sol, best, iters = None, None, None, 0
    for k, eps in enumerate(options.mpec_eps):
        warm = best is not None
        opts = replace(options.nlp, mu0=min(1e-2, 10. * eps) if warm else 1e-2,
                       bound_push=1e-2 * eps if warm else options.nlp.bound_push, mu_target=None, multistart=1)
        sol = nlp_solve(mpec_nlp(system, eps), opts, start=x, duals=duals)
        iters += sol.iters
        if sol.status != SOLVED:
            logger.debug('mpec %s: eps=%.0e stopped with %s', system.players, eps, sol.status)
            break
        x, best = sol.x, (sol, eps)
        duals = (sol.lambda_eq, sol.mu_ineq, sol.z_bounds)
    refined = _polish_mpec(system, x)
    if refined is not None:
        gain = system.objective().evaluate(refined)[0]
        # a refined point that earns less than the relaxed one belongs to another stationary point
        if best is None or gain >= system.objective().evaluate(x)[0] - 1e-6 * (1. + abs(gain)):
            return MpecResult(refined[system.alpha].copy(), refined, best[0] if best else sol, 0., True, iters,
                              polished=True)
    if best is None:
        return MpecResult(x[system.alpha].copy(), x, sol, options.mpec_eps[0], False, iters)
    sol, eps = best
    return MpecResult(x[system.alpha].copy(), x, sol, eps, eps <= 1e-6, iters)


# ---------------------------------------------------------------------------
# penalty formulation


class EpecLayout:
    """Variable blocks of the penalty problem: the shared core plus one multiplier set per group.

    Each group is a tuple of units sharing one objective (one unit per group in the
    equilibrium problem, all units in one group for the single owner).
    """
    def __init__(self, system: MpecSystem, groups: Sequence[Tuple[int, ...]]):
        self.system = system
        self.groups = [tuple(g) for g in groups]
        self.layout = system.layout
        lower = system.lower
        self.n_he = lower.n_w + lower.n_eq
        ids = system.scenario.dgs
        self.blocks = []
        for g in self.groups:
            name = '+'.join(ids[i].id for i in g)
            self.blocks.append(dict(
                mbar=self.layout.add(f'mu_bar[{name}]', self.n_he),
                munder=self.layout.add(f'mu_under[{name}]', lower.m),
                phi=self.layout.add(f'phi[{name}]', 1),
                sigma=self.layout.add(f'sigma[{name}]', lower.m),
                psi=self.layout.add(f'psi[{name}]', lower.m)))
        self.n = self.layout.n
        ident = np.arange(system.n_core)
        self.h_e = system.h_e.embed(ident, self.n)
        self.h_in = system.h_in.embed(ident, self.n)
        self.comp = system.comp.embed(ident, self.n)
        self.stationarity = [self._group_stationarity(g, b) for g, b in zip(self.groups, self.blocks)]
        self._cache = None

    def z_cols(self, group):
        sys_, lower = self.system, self.system.lower
        own = np.array([sys_.alpha[sys_.players.index(i)] for i in group])
        return np.concatenate([own, lower.mu, lower.w, lower.lam, sys_.s])

    def _group_stationarity(self, group, block):
        sys_, lower = self.system, self.system.lower
        z = self.z_cols(group)
        m = lower.m
        f = functools.reduce(operator.add, [sys_.profit_poly(i, self.n) for i in group])
        off_mu = len(group)
        off_s = len(group) + m + lower.n_w + lower.n_eq
        bound_rows = Poly2(len(z), self.n, None,
                           (np.concatenate([off_s + np.arange(m), off_mu + np.arange(m)]),
                            np.concatenate([block['sigma'], block['psi']]), -np.ones(2 * m)))
        return (-f).gradient_rows(z) - self.h_e.weighted_grad(block['mbar'], z) \
            - self.h_in.weighted_grad(block['munder'], z) + self.comp.weighted_grad(block['phi'], z) + bound_rows

    def penalty(self) -> Poly2:
        lower, s = self.system.lower, self.system.s
        a = [lower.mu] + [b['sigma'] for b in self.blocks] + [b['psi'] for b in self.blocks]
        b = [s] + [s for _ in self.blocks] + [lower.mu for _ in self.blocks]
        a, b = np.concatenate(a), np.concatenate(b)
        return Poly2(1, self.n, None, None, (np.zeros(len(a)), a, b, np.ones(len(a))))

    def constraints(self) -> Poly2:
        return Poly2.vstack([self.h_e, self.h_in] + self.stationarity)

    def constraint_names(self):
        lower = self.system.lower
        names = [f'stationarity:{w}' for w in self.layout.labels[lower.w[0]:lower.w[-1] + 1]]
        names += [f'follower:{e}' for e in lower.eq_names()]
        names += [f'slack:{e}' for e in lower.ineq_names()]
        ids = self.system.scenario.dgs
        for g in self.groups:
            name = '+'.join(ids[i].id for i in g)
            names += [f'leader[{name}]:{self.layout.labels[c]}' for c in self.z_cols(g)]
        return names

    def bounds(self):
        lb, ub = self.system.bounds(self.n)
        for b in self.blocks:
            lb[b['phi']] = 0.
            lb[b['sigma']] = 0.
            lb[b['psi']] = 0.
        return lb, ub

    def n_pairs(self):
        return self.system.lower.m * (1 + 2 * len(self.groups))

    def sizes(self):
        """Problem sizes: follower, each leader problem and the combined penalty problem."""
        lower = self.system.lower
        m = lower.m
        sizes = {
            'disco_variables': lower.n_w,
            'disco_constraints': lower.n_eq + m,
            'mpec_variables': 1 + lower.n_w + lower.n_eq + 2 * m,
            'mpec_constraints': self.n_he + m + 1,
            'nlp_variables': self.n,
            'nlp_constraints': self.n_he + m + sum(len(self.z_cols(g)) for g in self.groups),
        }
        return sizes

    def start_point(self, disco: DiscoSolution):
        """Core from the DisCo solution, multipliers by bounded least squares on each group's stationarity."""
        return self.fit_multipliers(self.system.start_point(disco, self.n))

    def fit_multipliers(self, x):
        """``x`` with every group's multiplier block refitted to the core variables."""
        x = np.array(x, dtype=float)
        for G, b in zip(self.stationarity, self.blocks):
            cols = np.concatenate([b['mbar'], b['munder'], b['phi'], b['sigma'], b['psi']])
            n_free = len(b['mbar']) + len(b['munder'])
            lo = np.concatenate([np.full(n_free, -np.inf), np.zeros(len(cols) - n_free)])
            A = sp.csr_matrix(G.jacobian(x)[:, cols])
            x[cols] = 0.
            fit = lsq_linear(A, -G.evaluate(x), bounds=(lo, np.full(len(cols), np.inf)), lsmr_tol='auto',
                             max_iter=500)
            x[cols] = fit.x
        return x

    def multipliers(self, x) -> List[StationarityMultipliers]:
        return [StationarityMultipliers(players=g, mu_bar=x[b['mbar']].copy(), mu_under=x[b['munder']].copy(),
                                        phi=float(x[b['phi']][0]), sigma=x[b['sigma']].copy(), psi=x[b['psi']].copy())
                for g, b in zip(self.groups, self.blocks)]

    def products(self, x):
        """Largest complementarity product over mu.s, sigma.s and psi.mu."""
        lower, s = self.system.lower, x[self.system.s]
        mu = x[lower.mu]
        worst = float(np.max(np.abs(mu * s))) if len(s) else 0.
        for b in self.blocks:
            worst = max(worst, float(np.max(np.abs(x[b['sigma']] * s))), float(np.max(np.abs(x[b['psi']] * mu))))
        return worst

    def polys(self):
        """Cached ``(penalty, constraints)``."""
        if self._cache is None:
            self._cache = (self.penalty(), self.constraints())
        return self._cache

    def residuals(self, x):
        """``(C_pen, largest constraint violation)`` at ``x``."""
        pen, G = self.polys()
        return float(pen.evaluate(x)[0]), float(np.max(np.abs(G.evaluate(x))))


def build_epec_nlp(scenario: Scenario, options: EpecOptions = None, groups=None):
    """Penalty problem over all active units (one group each unless ``groups`` is given).

    Returns ``(problem, epec_layout)``.
    """
    options = options or EpecOptions()
    players = active_units(scenario)
    if not players:
        raise ContractPricingError('equilibrium problem needs at least one unit with positive capacity')
    groups = [(i,) for i in players] if groups is None else groups
    system = MpecSystem(scenario, players, ContractOffer(tuple(costs(scenario))), options.line_limits,
                        options.alpha_cap_factor)
    el = EpecLayout(system, groups)
    lb, ub = el.bounds()
    penalty, constraints = el.polys()
    problem = poly_problem(penalty, constraints, None, lb, ub, names=el.layout.labels,
                           eq_names=el.constraint_names(), label=f'epec {scenario.label}'.strip())
    return problem, el


# ---------------------------------------------------------------------------
# active-set refinement

POLISH_THRESHOLDS = (1e-8, 1e-6, 1e-4, 1e-3)
DENSE_LSTSQ = 4_000_000


def _gauss_newton(G: Poly2, x, cols, tol, max_iter):
    """Minimum-norm Newton steps on ``G(x) = 0`` moving only ``cols``; None unless it converges."""
    x = x.copy()
    r = G.evaluate(x)
    start = float(np.max(np.abs(r)))
    for _ in range(max_iter):
        res = float(np.max(np.abs(r)))
        if res <= tol:
            return x
        if not np.isfinite(res) or res > 1e3 * max(start, 1.):
            return None
        J = G.jacobian(x)[:, cols]
        if J.shape[0] * J.shape[1] <= DENSE_LSTSQ:
            dx = np.linalg.lstsq(J.toarray(), -r, rcond=None)[0]
        else:
            dx = spla.lsmr(J, -r, atol=1e-14, btol=1e-14, maxiter=20 * len(cols))[0]
        x[cols] += dx
        r = G.evaluate(x)
    return x if float(np.max(np.abs(r))) <= tol else None


def _polish_at(el: EpecLayout, x, thr, tol, max_rounds, max_iter):
    system = el.system
    s_cols, mu_cols = system.s, system.lower.mu
    both = (x[s_cols] <= thr) & (x[mu_cols] <= thr)
    active = ~both & (x[s_cols] <= x[mu_cols])
    dropped = np.zeros(el.n, dtype=bool)
    lb, ub = el.bounds()
    _, G = el.polys()
    y = x.copy()
    for _ in range(max_rounds):
        inactive = ~both & ~active
        zero = dropped.copy()
        zero[s_cols[both | active]] = True
        zero[mu_cols[both | inactive]] = True
        for b in el.blocks:
            # phi multiplies mu^T s, which every fixed pair already zeroes
            zero[b['phi']] = True
            zero[b['sigma'][inactive]] = True
            zero[b['psi'][active]] = True
        y[zero] = 0.
        y = _gauss_newton(G, y, np.flatnonzero(~zero), tol, max_iter)
        if y is None:
            return None
        low = (y < lb - tol) | (y > ub + tol)
        bad = (active & low[mu_cols]) | (inactive & low[s_cols])
        signs = np.concatenate([np.concatenate([b['sigma'], b['psi']]) for b in el.blocks])
        wrong = signs[low[signs]]
        if low[system.alpha].any():
            return None
        if not bad.any() and not len(wrong):
            return np.clip(y, lb, ub)
        both |= bad
        active &= ~both
        dropped[wrong] = True
    return None


def polish(el: EpecLayout, x, tol=1e-9, thresholds=POLISH_THRESHOLDS, max_rounds=5, max_iter=30):
    """Refine a near-equilibrium point by fixing every complementarity pair to one side.

    A pair whose slack and multiplier are both below the threshold is fixed biactive,
    otherwise the smaller of the two is set to zero.  The remaining system is solved
    by Gauss-Newton; pairs whose free member turns negative join the biactive set and
    negative bound multipliers are pinned at zero.  Thresholds are tried in turn and
    the first refined point is returned, or None.
    """
    if not np.all(np.isfinite(x)):
        return None
    for thr in thresholds:
        y = _polish_at(el, np.asarray(x, dtype=float), thr, tol, max_rounds, max_iter)
        if y is not None:
            logger.debug('polished at threshold %.0e', thr)
            return y
    return None


# ---------------------------------------------------------------------------
# solving


@dataclass
class Attempt:
    start_id: int
    alpha_start: np.ndarray
    alpha: np.ndarray
    status: str
    c_pen: float
    feasibility: float
    accepted: bool
    iters: int
    wall_seconds: float
    checks: Dict[str, float] = field(default_factory=dict)
    message: str = ''
    x: Optional[np.ndarray] = None
    nlp: Optional[NlpSolution] = None
    polished: bool = False

    def record(self):
        return dict(start_id=self.start_id, alpha_start=[float(a) for a in self.alpha_start],
                    alpha=[float(a) for a in self.alpha], status=self.status, c_pen=float(self.c_pen),
                    feasibility=float(self.feasibility), accepted=bool(self.accepted), iters=int(self.iters),
                    wall_seconds=float(self.wall_seconds), checks={k: float(v) for k, v in self.checks.items()},
                    polished=bool(self.polished), message=self.message)


@dataclass
class EpecSolution:
    alpha: ContractOffer
    point: Optional[PrimalDualPoint]
    multipliers: List[StationarityMultipliers]
    c_pen: float
    status: str
    iters: int
    wall_seconds: float
    start_id: int
    mode: str = 'epec'
    players: Tuple[int, ...] = ()
    disco: Optional[DiscoSolution] = None
    checks: Dict[str, float] = field(default_factory=dict)
    sizes: Dict[str, int] = field(default_factory=dict)
    attempts: List[Attempt] = field(default_factory=list)
    distinct: List[np.ndarray] = field(default_factory=list)
    nlp: Optional[NlpSolution] = None

    @property
    def accepted(self):
        return self.status == ACCEPTED

    def profits(self, scenario: Scenario):
        return profit(scenario, self.alpha, self.disco.dispatch)


def marginal_value_start(scenario: Scenario, players, options: EpecOptions = None) -> np.ndarray:
    """Each player's most profitable price against the cost-price LMPs at its bus.

    A price ``v`` equal to one period's LMP earns ``(v - c)`` in every period whose LMP
    is at least ``v``; the best such ``v`` (or the cost when none beats it) is returned.
    """
    options = options or EpecOptions()
    c = costs(scenario)
    disco = solve_disco(scenario, ContractOffer(tuple(c)), options.disco, line_limits=options.line_limits)
    lmp, hours, buses = disco.lmp(), scenario.hours, scenario.dg_bus_indices()
    out = []
    for i in players:
        v = lmp[buses[i]]
        value = [(v_t - c[i]) * hours[v >= v_t].sum() for v_t in v]
        k = int(np.argmax(value))
        out.append(float(v[k]) if value[k] > 0 else float(c[i]))
    return np.array(out)


def _default_starts(scenario: Scenario, players, n_starts, seed, cap, anchor=None):
    prices, hours = scenario.prices, scenario.hours
    c = costs(scenario)[list(players)]
    weighted = np.full(len(players), float(prices @ hours / hours.sum()))
    anchor = weighted if anchor is None else np.asarray(anchor, dtype=float)
    spread = np.maximum(anchor - c, 0.01)
    starts = [anchor, c.copy(), weighted]
    k = 1
    while len(starts) < n_starts:
        rng = rng_with_seed(seed, k)
        # stay close to the marginal values; far above them the follower stops buying
        starts.append(anchor + spread * rng.uniform(-0.5, 0.25, len(players)))
        k += 1
    unique = []
    for a in starts[:n_starts]:
        a = np.clip(a, 1e-3 * cap, 0.999 * cap)
        if not any(np.allclose(a, u, atol=1e-9) for u in unique):
            unique.append(a)
    return unique


def _full_alpha(scenario, players, alpha_players):
    alpha = costs(scenario)
    alpha[list(players)] = alpha_players
    return alpha


def _accepts(c_pen, feas, checks, options: EpecOptions):
    return bool(np.isfinite(c_pen) and c_pen <= options.epsilon_comp and feas <= options.nlp.tol and
                checks['products'] <= options.products_tol and checks['cap_slack'] > 0 and
                checks['follower_kkt'] <= options.follower_tol)


def _run_attempt(scenario, problem, el: EpecLayout, k, alpha0, options: EpecOptions):
    t0 = time.time()
    players = el.system.players
    offer = ContractOffer(tuple(_full_alpha(scenario, players, alpha0)))
    try:
        disco = solve_disco(scenario, offer, options.disco, line_limits=options.line_limits)
    except ContractPricingError as e:
        return Attempt(k, alpha0, alpha0, 'start_failed', np.inf, np.inf, False, 0, time.time() - t0, message=str(e))
    x0 = el.start_point(disco)
    opts = replace(options.nlp, multistart=1,
                   mu_target=min(options.nlp.tol / 10., 0.1 * options.epsilon_comp / max(1, el.n_pairs())))
    if opts.trace_path:
        root, ext = os.path.splitext(opts.trace_path)
        opts = replace(opts, trace_path=f'{root}_start{k}{ext or ".csv"}')
    sol = nlp_solve(problem, opts, start=x0, start_id=k)
    x, c_pen, feas = sol.x, float(sol.objective), float(sol.kkt[1])
    checks = _post_checks(scenario, el, x, options)
    accepted, polished, message = _accepts(c_pen, feas, checks, options), False, sol.message
    if not accepted:
        for origin in (sol.x, x0):
            y = polish(el, origin)
            if y is None:
                continue
            y_pen, y_feas = el.residuals(y)
            y_checks = _post_checks(scenario, el, y, options)
            if _accepts(y_pen, y_feas, y_checks, options):
                x, c_pen, feas, checks, accepted, polished = y, y_pen, y_feas, y_checks, True, True
                message = f'{sol.message}; refined on the active set'.lstrip('; ')
                break
    return Attempt(k, alpha0, x[el.system.alpha].copy(), sol.status, c_pen, feas, accepted, sol.iters,
                   time.time() - t0, checks, message, x, sol, polished)


def _post_checks(scenario, el: EpecLayout, x, options: EpecOptions):
    system = el.system
    if not np.all(np.isfinite(x)):
        return dict(products=np.inf, cap_slack=-np.inf, follower_kkt=np.inf)
    disco = system.embedded_disco(x)
    follower = kkt_check(scenario, disco.offer, disco)
    return dict(products=el.products(x),
                cap_slack=float(np.min(system.cap - x[system.alpha])) - 1e-6 * system.cap,
                follower_kkt=float(max(follower.values())))


def _distinct(points, tol):
    out = []
    for p in points:
        if not any(np.max(np.abs(p - q)) <= tol for q in out):
            out.append(p)
    return out


def _solve_penalty(scenario: Scenario, options: EpecOptions, groups, mode, starts=None, strict=False):
    t0 = time.time()
    players = active_units(scenario)
    if not players:
        # no unit can sell: prices stay at cost and nothing is dispatched
        offer = ContractOffer(tuple(costs(scenario)))
        disco = solve_disco(scenario, offer, options.disco, line_limits=options.line_limits)
        return EpecSolution(alpha=offer, point=None, multipliers=[], c_pen=0., status=ACCEPTED, iters=0,
                            wall_seconds=time.time() - t0, start_id=0, mode=mode, players=(), disco=disco)
    problem, el = build_epec_nlp(scenario, options, groups)
    if groups is None:
        groups = el.groups
    cap = el.system.cap
    if starts is None:
        try:
            anchor = marginal_value_start(scenario, players, options)
        except ContractPricingError as e:
            logger.warning('no marginal-value start (%s); starting from the market price', e)
            anchor = None
        starts = _default_starts(scenario, players, options.starts, options.seed, cap, anchor)
    else:
        starts = [np.asarray(s, dtype=float).reshape(len(players)) for s in starts]
    sizes = el.sizes()
    logger.info('%s %s: %d variables, %d constraints, %d starts', mode, scenario.label, sizes['nlp_variables'],
                sizes['nlp_constraints'], len(starts))

    writer = get_writer(options.writer_dir)
    with ThreadPoolExecutor(max_workers=min(len(starts), 8)) as pool:
        futures = [pool.submit(_run_attempt, scenario, problem, el, k, a, options) for k, a in enumerate(starts)]
        attempts = [f.result() for f in tqdm(futures, desc=f'{mode} starts',
                                             disable=progress_disabled(options.verbose))]
    for a in attempts:
        writer.add_scalar(f'{mode}/c_pen', a.c_pen if np.isfinite(a.c_pen) else -1., a.start_id)
        log = logger.info if a.accepted else logger.warning
        log('start %d: alpha=%s status=%s c_pen=%.2e feas=%.1e checks=%s', a.start_id, np.round(a.alpha, 4),
            a.status, a.c_pen, a.feasibility, {k: f'{v:.1e}' for k, v in a.checks.items()})
    writer.close()

    def rank(a: Attempt):
        return (not a.accepted, a.c_pen + a.feasibility if np.isfinite(a.c_pen) else np.inf, a.start_id)

    best = min(attempts, key=rank)
    accepted = [a for a in attempts if a.accepted]
    distinct = _distinct([_full_alpha(scenario, players, a.alpha) for a in sorted(accepted, key=rank)],
                         options.distinct_tol)
    if len(distinct) > 1:
        logger.warning('%s: %d distinct accepted points', mode, len(distinct))
    iters = int(sum(a.iters for a in attempts))
    if best.x is None:
        solution = EpecSolution(alpha=ContractOffer(tuple(_full_alpha(scenario, players, best.alpha))), point=None,
                                multipliers=[], c_pen=np.inf, status=NOT_FOUND, iters=iters,
                                wall_seconds=time.time() - t0, start_id=best.start_id, mode=mode, players=players,
                                sizes=sizes, attempts=attempts)
    else:
        disco = el.system.embedded_disco(best.x)
        solution = EpecSolution(alpha=disco.offer, point=el.system.point(best.x), multipliers=el.multipliers(best.x),
                                c_pen=best.c_pen, status=ACCEPTED if best.accepted else NOT_FOUND, iters=iters,
                                wall_seconds=time.time() - t0, start_id=best.start_id, mode=mode, players=players,
                                disco=disco, checks=best.checks, sizes=sizes, attempts=attempts, distinct=distinct,
                                nlp=best.nlp)
    if not solution.accepted:
        logger.warning('%s %s: no start accepted; best c_pen=%.3e (start %d)', mode, scenario.label,
                       solution.c_pen, solution.start_id)
        if strict:
            raise EquilibriumNotFound(solution, solution.c_pen)
    else:
        logger.info('%s %s: alpha=%s c_pen=%.2e (%d iterations, %.2fs)', mode, scenario.label,
                    np.round(solution.alpha.as_array(), 4), solution.c_pen, iters, solution.wall_seconds)
    return solution


def solve_epec(scenario: Scenario, options: EpecOptions = None, starts=None, strict=False) -> EpecSolution:
    """Nash equilibrium of the contract-pricing game by multistart solves of the penalty problem."""
    return _solve_penalty(scenario, options or EpecOptions(), None, 'epec', starts, strict)


def solve_single_owner(scenario: Scenario, options: EpecOptions = None, starts=None, strict=False) -> EpecSolution:
    """Prices that maximize the summed profit of all units under one owner."""
    players = active_units(scenario)
    groups = [players] if players else None
    return _solve_penalty(scenario, options or EpecOptions(), groups, 'single-owner', starts, strict)


# ---------------------------------------------------------------------------
# unilateral deviations


def profit_curve(scenario: Scenario, offer: ContractOffer, i: int, grid, options: NlpOptions = None,
                 line_limits=True, workers=None):
    """Profit of unit ``i`` at each price in ``grid`` with the other prices of ``offer`` fixed.

    Returns ``(profits, energies, failed)``; grid points whose DisCo solve fails are NaN and flagged.
    """
    grid = np.asarray(grid, dtype=float)

    def at(a):
        try:
            sol = solve_disco(scenario, offer.replaced(i, float(a)), options, line_limits=line_limits)
        except ContractPricingError as e:
            logger.warning('unit %s at %.4f: %s', scenario.dgs[i].id, a, e)
            return np.nan, np.nan, True
        return float(profit(scenario, sol.offer, sol.dispatch)[i]), float(sol.dg_energy()[i]), False

    with ThreadPoolExecutor(max_workers=workers or 8) as pool:
        out = list(pool.map(at, grid))
    profits = np.array([o[0] for o in out])
    energies = np.array([o[1] for o in out])
    failed = np.array([o[2] for o in out], dtype=bool)
    return profits, energies, failed


@dataclass
class DeviationGain:
    dg: int
    alpha: float
    profit: float
    best_alpha: float
    best_profit: float

    @property
    def gain(self):
        return self.best_profit - self.profit

    @property
    def relative_gain(self):
        return self.gain / abs(self.profit) if self.profit else (np.inf if self.gain > 0 else 0.)


def deviation_gain(scenario: Scenario, offer: ContractOffer, options: NlpOptions = None, half_width=5., step=0.1,
                   line_limits=True) -> List[DeviationGain]:
    """Best unilateral profit gain of every unit when the others keep ``offer``."""
    gains = []
    base = solve_disco(scenario, offer, options, line_limits=line_limits)
    base_profit = profit(scenario, offer, base.dispatch)
    for i in active_units(scenario):
        a = offer.alpha[i]
        grid = price_grid(a, half_width, step)
        profits, _, failed = profit_curve(scenario, offer, i, grid, options, line_limits)
        profits = np.where(failed, -np.inf, profits)
        k = int(np.argmax(profits))
        best = max(float(profits[k]), float(base_profit[i]))
        gains.append(DeviationGain(i, a, float(base_profit[i]), float(grid[k]) if best > base_profit[i] else a, best))
    return gains


def price_grid(center, half_width, step):
    """Symmetric grid around ``center`` that contains it exactly and stays nonnegative."""
    assert step > 0 and half_width >= step, 'need step > 0 and half_width >= step'
    k = int(np.floor(half_width / step + 1e-9))
    grid = center + step * np.arange(-k, k + 1)
    return grid[grid >= 0]
