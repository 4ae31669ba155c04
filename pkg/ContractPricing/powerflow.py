"""Approximate active power flow on radial feeders.

The flow leaving bus k towards bus l is ``V_k (V_k - V_l) / z_kl``; the two
directed flows of a line add up to its loss ``(V_k - V_l)^2 / z_kl``.
All functions broadcast over numpy arrays and are free of side effects.
"""
from dataclasses import dataclass

import numpy as np

from ContractPricing.model import Network, Scenario


@dataclass(frozen=True)
class VoltageProfile:
    v: np.ndarray  # (n_bus, n_period) p.u.

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        assert np.all(np.isfinite(v)) and np.all(v > 0), 'voltages must be finite and positive'
        object.__setattr__(self, 'v', v)


@dataclass(frozen=True)
class InjectionProfile:
    p: np.ndarray  # (n_bus, n_period) p.u., generation minus demand

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        assert np.all(np.isfinite(p)), 'injections must be finite'
        object.__setattr__(self, 'p', p)


def line_flow(v_from, v_to, z):
    return v_from * (v_from - v_to) / z


def flow_derivatives(v_from, v_to, z):
    """First and second derivatives of ``line_flow`` with respect to both voltages.

    Returns ``(dP/dv_from, dP/dv_to, (d2/dv_from2, d2/dv_from dv_to, d2/dv_to2))``.
    """
    d_from = (2. * v_from - v_to) / z
    d_to = -v_from / z
    zero = np.zeros_like(np.asarray(z, dtype=float) * v_from)
    return d_from, d_to, (2. / z + zero, -1. / z + zero, zero)


def branch_flows(network: Network, v):
    """Directed flows (from->to, to->from) of every line, shape (n_line, n_period)."""
    v = VoltageProfile(v).v
    frm, to, z = network.line_ends()
    return line_flow(v[frm], v[to], z[:, None]), line_flow(v[to], v[frm], z[:, None])


def bus_mismatch(network: Network, v, inj):
    """Balance residual ``-P_g + P_d + sum of flows leaving the bus`` per bus and period.

    ``inj`` is the net injection P_g - P_d.
    """
    v = VoltageProfile(v).v
    p = InjectionProfile(inj).p
    frm, to, _ = network.line_ends()
    out_ft, out_tf = branch_flows(network, v)
    outflow = np.zeros_like(v)
    np.add.at(outflow, frm, out_ft)
    np.add.at(outflow, to, out_tf)
    return -p + outflow


def total_loss(network: Network, v):
    v = VoltageProfile(v).v
    frm, to, z = network.line_ends()
    return np.sum((v[frm] - v[to]) ** 2 / z[:, None], axis=0)


def injection_profile(scenario: Scenario, p_sb_mw, p_dg_mw, demand=None):
    """Net injection per bus (p.u.): substation import and DG output (both MW) minus demand.

    ``demand`` defaults to the scenario demand matrix.
    """
    net = scenario.network
    p_sb = np.atleast_1d(np.asarray(p_sb_mw, dtype=float))
    gen = np.zeros((net.n_bus, len(p_sb)))
    gen[net.sb_index] += p_sb / net.base_mva
    if scenario.n_dg:
        np.add.at(gen, scenario.dg_bus_indices(), np.asarray(p_dg_mw, dtype=float).reshape(scenario.n_dg, -1)
                  / net.base_mva)
    demand = scenario.demand_matrix() if demand is None else np.asarray(demand, dtype=float).reshape(gen.shape)
    return InjectionProfile(gen - demand)
