"""Networks, DG fleets and load-duration-curve scenarios.

Network quantities are per unit on ``Network.base_mva``; DG limits are MW and
costs €/MWh.  Every type is frozen and checked once by ``Scenario.validate``.
"""
import math
import os
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from scipy.optimize import brentq
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from ContractPricing.common import get_logger, ScenarioParseError, ScenarioValidationError, ReconstructionError

logger = get_logger('ContractPricing.model')

DATASET_DIR = os.path.join(os.path.dirname(__file__), 'datasets')

# Scales the nominal line impedances so that the no-DG loss of the 3-bus system is 0.057 MW.
IMPEDANCE_SCALE_3BUS = 0.0255

HOURS_PER_YEAR = 8760.


@dataclass(frozen=True)
class Bus:
    id: str
    v_min: float
    v_max: float
    v_fixed: Optional[float] = None


@dataclass(frozen=True)
class Line:
    frm: str
    to: str
    z: float
    p_max: float


@dataclass(frozen=True)
class Substation:
    bus: str
    p_min: float
    p_max: float


@dataclass(frozen=True)
class DgUnit:
    id: str
    bus: str
    p_min: float
    p_max: float
    cost: float


@dataclass(frozen=True)
class Period:
    index: int
    hours: float
    market_price: float
    demand: Tuple[float, ...]

    @property
    def total_demand(self):
        return float(sum(self.demand))


@dataclass(frozen=True)
class Network:
    buses: Tuple[Bus, ...]
    lines: Tuple[Line, ...]
    substation: Substation
    base_mva: float
    impedance_scale: float = 1.0

    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def n_line(self):
        return len(self.lines)

    @property
    def bus_ids(self):
        return [b.id for b in self.buses]

    def bus_index(self, bus_id):
        for k, b in enumerate(self.buses):
            if b.id == str(bus_id):
                return k
        raise KeyError(bus_id)

    @property
    def sb_index(self):
        return self.bus_index(self.substation.bus)

    def line_ends(self):
        """(from indices, to indices, effective impedances) as arrays."""
        frm = np.array([self.bus_index(l.frm) for l in self.lines], dtype=int)
        to = np.array([self.bus_index(l.to) for l in self.lines], dtype=int)
        z = np.array([l.z for l in self.lines], dtype=float) * self.impedance_scale
        return frm, to, z

    def v_limits(self):
        return np.array([b.v_min for b in self.buses]), np.array([b.v_max for b in self.buses])

    def uniform_demand(self, per_node, loaded=None):
        loaded = self._loaded(loaded)
        return tuple(float(per_node) if b.id in loaded else 0. for b in self.buses)

    def _loaded(self, loaded):
        if loaded is None:
            return {b.id for b in self.buses if b.id != self.substation.bus}
        return {str(b) for b in loaded}


@dataclass(frozen=True)
class Scenario:
    network: Network
    dgs: Tuple[DgUnit, ...]
    periods: Tuple[Period, ...]
    label: str = ''
    notes: str = ''

    @property
    def n_dg(self):
        return len(self.dgs)

    @property
    def n_period(self):
        return len(self.periods)

    @property
    def total_hours(self):
        return float(sum(p.hours for p in self.periods))

    @property
    def prices(self):
        return np.array([p.market_price for p in self.periods])

    @property
    def hours(self):
        return np.array([p.hours for p in self.periods])

    def dg_bus_indices(self):
        return np.array([self.network.bus_index(d.bus) for d in self.dgs], dtype=int)

    def demand_matrix(self):
        """Demand per bus and period, p.u., shape (n_bus, n_period)."""
        return np.array([p.demand for p in self.periods], dtype=float).T.copy()

    def with_dgs(self, dgs, label=None):
        return replace(self, dgs=tuple(dgs), label=self.label if label is None else label).validate()

    def with_costs(self, costs, label=None):
        dgs = [replace(d, cost=float(costs.get(d.id, d.cost))) for d in self.dgs]
        return self.with_dgs(dgs, label)

    def scaled_hours(self, factor):
        periods = tuple(replace(p, hours=p.hours * factor) for p in self.periods)
        return replace(self, periods=periods).validate()

    def single_period(self, t):
        return replace(self, periods=(replace(self.periods[t], index=0),))

    def validate(self):
        _validate(self)
        return self


def _fail(field, problem):
    raise ScenarioValidationError(field, problem)


def _validate(sc: Scenario):
    net = sc.network
    if not net.base_mva > 0:
        _fail('network.base_mva', 'base power must be positive')
    if not net.impedance_scale > 0:
        _fail('network.impedance_scale', 'impedance scale must be positive')
    ids = [b.id for b in net.buses]
    if len(set(ids)) != len(ids):
        _fail('bus', 'bus ids must be unique')
    for k, b in enumerate(net.buses):
        if not 0 < b.v_min < b.v_max:
            _fail(f'bus[{k}].v_min', f'0 < v_min < v_max violated for bus {b.id}')
        if b.v_fixed is not None and not b.v_min <= b.v_fixed <= b.v_max:
            _fail(f'bus[{k}].v_fixed', f'pinned voltage of bus {b.id} outside its limits')
    pairs = set()
    for k, l in enumerate(net.lines):
        if l.frm not in ids or l.to not in ids:
            _fail(f'line[{k}]', f'endpoint of line {l.frm}-{l.to} is not a bus')
        if l.frm == l.to:
            _fail(f'line[{k}]', 'from == to')
        if not l.z > 0:
            _fail(f'line[{k}].z', f'impedance of line {l.frm}-{l.to} must be positive')
        if not l.p_max > 0:
            _fail(f'line[{k}].p_max', f'flow limit of line {l.frm}-{l.to} must be positive')
        key = frozenset((l.frm, l.to))
        if key in pairs:
            _fail(f'line[{k}]', f'duplicate line {l.frm}-{l.to}')
        pairs.add(key)
    if net.substation.bus not in ids:
        _fail('substation.bus', f'substation bus {net.substation.bus} is not a bus')
    if not 0 <= net.substation.p_min <= net.substation.p_max:
        _fail('substation', '0 <= p_min <= p_max violated')
    if len(ids) > 1:
        frm, to, _ = net.line_ends()
        adj = coo_matrix((np.ones(len(frm)), (frm, to)), shape=(len(ids), len(ids)))
        n_comp, _ = connected_components(adj, directed=False)
        if n_comp != 1:
            _fail('line', f'network is not connected ({n_comp} components)')
    for k, d in enumerate(sc.dgs):
        if d.bus not in ids:
            _fail(f'dg[{k}].bus', f'bus {d.bus} of unit {d.id} is not a bus')
        if not 0 <= d.p_min <= d.p_max:
            _fail(f'dg[{k}]', f'0 <= p_min <= p_max violated for unit {d.id}')
        if not d.cost >= 0:
            _fail(f'dg[{k}].cost', 'cost must be nonnegative')
    if len({d.id for d in sc.dgs}) != len(sc.dgs):
        _fail('dg', 'unit ids must be unique')
    if not sc.periods:
        _fail('period', 'at least one period required')
    for t, p in enumerate(sc.periods):
        if not p.hours > 0:
            _fail(f'period[{t}].hours', 'hours must be positive')
        if not p.market_price >= 0:
            _fail(f'period[{t}].price', 'market price must be nonnegative')
        if len(p.demand) != len(ids):
            _fail(f'period[{t}].demand', f'expected {len(ids)} values, got {len(p.demand)}')
        if any(not (d >= 0 and math.isfinite(d)) for d in p.demand):
            _fail(f'period[{t}].demand', 'demand must be finite and nonnegative')


# ---------------------------------------------------------------------------
# dataset files


def _row(raw, n_min, n_max, where):
    if not isinstance(raw, (list, tuple)) or not n_min <= len(raw) <= n_max:
        _fail(where, f'expected a row of {n_min}..{n_max} values, got {raw!r}')
    return list(raw)


def _num(value, where):
    try:
        return float(value)
    except (TypeError, ValueError):
        _fail(where, f'not a number: {value!r}')


def _section(raw, name, kind):
    value = raw[name]
    if not isinstance(value, (list, tuple) if kind is list else kind):
        _fail(name, f'expected a {"list" if kind is list else "mapping"}, got {value!r}')
    return value


def scenario_from_dict(raw, case=None, source='<dict>'):
    if not isinstance(raw, dict):
        _fail('<root>', 'dataset must be a mapping')
    for section in ('network', 'bus', 'line', 'substation', 'period'):
        if section not in raw:
            _fail(section, 'missing section')
    net_raw = raw['network'] or {}
    buses = []
    for k, r in enumerate(_section(raw, 'bus', list)):
        r = _row(r, 3, 4, f'bus[{k}]')
        v_fixed = None if len(r) < 4 or r[3] is None else _num(r[3], f'bus[{k}].v_fixed')
        buses.append(Bus(str(r[0]), _num(r[1], f'bus[{k}].v_min'), _num(r[2], f'bus[{k}].v_max'), v_fixed))
    lines = []
    for k, r in enumerate(raw['line'] or []):
        r = _row(r, 4, 4, f'line[{k}]')
        lines.append(Line(str(r[0]), str(r[1]), _num(r[2], f'line[{k}].z'), _num(r[3], f'line[{k}].p_max')))
    sb_raw = _section(raw, 'substation', dict)
    for key in ('bus', 'p_max'):
        if key not in sb_raw:
            _fail(f'substation.{key}', 'missing field')
    substation = Substation(str(sb_raw['bus']), _num(sb_raw.get('p_min', 0.), 'substation.p_min'),
                            _num(sb_raw['p_max'], 'substation.p_max'))
    network = Network(tuple(buses), tuple(lines), substation,
                      _num(net_raw.get('base_mva', 10.), 'network.base_mva'),
                      _num(net_raw.get('impedance_scale', 1.), 'network.impedance_scale'))
    dg_rows = raw.get('dg') or []
    if case is not None:
        cases = raw.get('cases') or {}
        if case not in cases:
            _fail('cases', f'unknown case {case!r}; available: {sorted(cases)}')
        dg_rows = cases[case].get('dg') or []
    dgs = []
    for k, r in enumerate(dg_rows):
        r = _row(r, 5, 5, f'dg[{k}]')
        dgs.append(DgUnit(str(r[0]), str(r[1]), _num(r[2], f'dg[{k}].p_min'), _num(r[3], f'dg[{k}].p_max'),
                          _num(r[4], f'dg[{k}].cost')))
    loaded = net_raw.get('loaded_buses')
    periods = []
    for t, r in enumerate(_section(raw, 'period', list)):
        if not isinstance(r, dict):
            _fail(f'period[{t}]', 'expected a mapping with hours, price, demand')
        demand = r.get('demand', 0.)
        if isinstance(demand, (list, tuple)):
            demand = tuple(_num(d, f'period[{t}].demand') for d in demand)
        else:
            demand = network.uniform_demand(_num(demand, f'period[{t}].demand'), loaded)
        periods.append(Period(t, _num(r.get('hours'), f'period[{t}].hours'),
                              _num(r.get('price'), f'period[{t}].price'), demand))
    label = str(raw.get('label', os.path.basename(source)))
    if case is not None:
        label = f'{label} {case}'
    return Scenario(network, tuple(dgs), tuple(periods), label, str(raw.get('notes', ''))).validate()


def load_scenario(path, case=None) -> Scenario:
    with open(path, 'r') as f:
        try:
            raw = yaml.load(f, yaml.SafeLoader)
        except yaml.YAMLError as e:
            mark = getattr(e, 'problem_mark', None)
            line, col = (mark.line + 1, mark.column + 1) if mark is not None else (0, 0)
            raise ScenarioParseError(path, line, col, getattr(e, 'problem', None) or str(e)) from e
    return scenario_from_dict(raw, case=case, source=path)


def dump_scenario(sc: Scenario):
    net = sc.network
    return {
        'label': sc.label,
        'notes': sc.notes,
        'network': {'base_mva': net.base_mva, 'impedance_scale': net.impedance_scale},
        'bus': [[b.id, b.v_min, b.v_max] + ([b.v_fixed] if b.v_fixed is not None else []) for b in net.buses],
        'line': [[l.frm, l.to, l.z, l.p_max] for l in net.lines],
        'substation': {'bus': net.substation.bus, 'p_min': net.substation.p_min, 'p_max': net.substation.p_max},
        'dg': [[d.id, d.bus, d.p_min, d.p_max, d.cost] for d in sc.dgs],
        'period': [{'hours': p.hours, 'price': p.market_price, 'demand': list(p.demand)} for p in sc.periods],
    }


def save_scenario(sc: Scenario, path):
    with open(path, 'w') as f:
        yaml.safe_dump(dump_scenario(sc), f, sort_keys=False)
    return path


# ---------------------------------------------------------------------------
# bundled systems


def build_3bus(impedance_scale=IMPEDANCE_SCALE_3BUS) -> Scenario:
    """Three-bus radial feeder: substation at bus 1, DG1 at bus 2, DG2 at bus 3, 0.2 p.u. at every node."""
    buses = tuple(Bus(str(k), 0.9, 1.05) for k in (1, 2, 3))
    lines = (Line('1', '2', 1.236, 1.), Line('2', '3', 1.144, 1.))
    network = Network(buses, lines, Substation('1', 0., 4.), 10., impedance_scale)
    dgs = (DgUnit('DG1', '2', 0., 1., 60.), DgUnit('DG2', '3', 0., 1., 60.))
    periods = (Period(0, HOURS_PER_YEAR, 60., network.uniform_demand(0.2, loaded=('1', '2', '3'))),)
    notes = '' if impedance_scale == 1. else f'line impedances scaled by {impedance_scale:g} (loss calibration)'
    return Scenario(network, dgs, periods, '3-bus', notes).validate()


def build_3bus_symmetric(z=1.2, impedance_scale=IMPEDANCE_SCALE_3BUS) -> Scenario:
    """Substation in the middle of two equal lines, identical DGs at both ends."""
    base = build_3bus(impedance_scale)
    network = replace(base.network, lines=(Line('1', '2', z, 1.), Line('2', '3', z, 1.)),
                      substation=Substation('2', 0., 4.))
    dgs = (DgUnit('DG1', '1', 0., 1., 60.), DgUnit('DG2', '3', 0., 1., 60.))
    return Scenario(network, dgs, base.periods, '3-bus symmetric', base.notes).validate()


def build_34bus(case='case1') -> Scenario:
    return load_scenario(os.path.join(DATASET_DIR, '34bus.yaml'), case=case)


def build_6bus() -> Scenario:
    return load_scenario(os.path.join(DATASET_DIR, '6bus.yaml'))


def bundled_scenario(name) -> Scenario:
    if name == '3bus':
        return build_3bus()
    if name == '3bus-raw':
        return build_3bus(impedance_scale=1.)
    if name == '3bus-nodg':
        return build_3bus().with_dgs([], label='3-bus without DG')
    if name == '6bus':
        return build_6bus()
    if name == 'ow1':
        return build_34bus('case1')
    if name == '34bus-nodg':
        return build_34bus('nodg')
    if name.startswith('34bus-'):
        return build_34bus(name[len('34bus-'):])
    if os.path.exists(name):
        return load_scenario(name)
    raise KeyError(f'unknown scenario {name!r}')


# ---------------------------------------------------------------------------
# demand reconstruction


def reconstruct_demand_levels(payments: Sequence[float], prices: Sequence[float], network: Network,
                              hours: Union[float, Sequence[float]], loaded=None, options=None):
    """Demand per period (MW) whose supply (demand plus model loss) matches the market payment.

    The supply level of period t is ``payments[t] / (prices[t] * hours[t])``. Demand is spread
    uniformly on the loaded buses; the loss at a demand level is that of the cost-minimal
    dispatch without DG.
    """
    from ContractPricing.disco import ContractOffer, solve_disco
    from ContractPricing.common import ContractPricingError

    payments = np.asarray(payments, dtype=float)
    prices = np.asarray(prices, dtype=float)
    assert payments.shape == prices.shape, 'payments and prices must have the same length'
    hours = np.broadcast_to(np.asarray(hours, dtype=float), payments.shape)
    n_loaded = len(network._loaded(loaded))
    base = network.base_mva

    def supply_at(demand_mw, t):
        if demand_mw <= 0:
            # no demand, no flow and no loss
            return 0.
        per_node = demand_mw / base / n_loaded
        sc = Scenario(network, (), (Period(0, hours[t], prices[t], network.uniform_demand(per_node, loaded)),),
                      'reconstruction').validate()
        try:
            sol = solve_disco(sc, ContractOffer(()), options)
        except ContractPricingError as e:
            raise ReconstructionError(t, f'DisCo solve failed at demand {demand_mw:.4f} MW ({e})') from e
        return float(sol.dispatch.p_sb[0])

    levels = []
    for t in range(len(payments)):
        if payments[t] <= 0:
            levels.append(0.)
            continue
        if not prices[t] > 0:
            raise ReconstructionError(t, 'positive payment at zero price')
        supply = payments[t] / (prices[t] * hours[t])
        if supply > network.substation.p_max * base:
            raise ReconstructionError(t, f'supply {supply:.3f} MW exceeds the substation limit')
        excess = supply_at(supply, t) - supply
        if abs(excess) <= 1e-9:
            d = supply
        elif excess < 0:
            raise ReconstructionError(t, f'supply {supply:.4f} MW is not bracketed: serving that demand takes '
                                         f'{supply + excess:.4f} MW')
        else:
            d = brentq(lambda d: supply_at(d, t) - supply, 0., supply, xtol=1e-9)
        logger.info('period %d: supply %.4f MW -> demand %.4f MW (loss %.4f MW)', t, supply, d, supply - d)
        levels.append(float(d))
    return np.array(levels)
