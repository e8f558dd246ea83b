"""Linear resistive power flow, solved island by island.

Per-unit conventions
--------------------
* Power is per phase, normalised by ``SolverConfig.base_kw``.
* Injections are positive into the bus; loads inject negative power.
* Flows are taken from ``from_bus`` to ``to_bus`` of each line.
* On every energized island the voltages satisfy
  ``v_i - v_j = r_ij * f_ij`` on each in-service line and
  ``sum_j f_ij = p_i`` at each non-slack bus, with the slack pinned at
  ``v_slack``.  The three phases are solved as independent copies of the
  same island topology, each carrying that phase's loads and DER output.

Island energization rules: an island is energized when it holds the
substation or at least one enabled grid-forming DER.  The slack is the
substation when present, otherwise the largest grid-forming DER (lowest bus
id wins ties).  A substation-fed island has unlimited capacity and its DERs
inject their rating.  A DER-only island has capacity equal to its enabled
DER ratings; grid-feeding units inject their rating and grid-forming units
share the remaining demand in proportion to rating.  Demand above capacity
marks the whole solution as not converged.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .grid import NetworkGraph, effective_adjacency, in_service, islands


class PowerFlowError(RuntimeError):
    """Internal solver failure (singular island system)."""


class InvalidNetworkError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    base_kw: float = 1000.0
    v_slack: float = 1.0

    def __post_init__(self):
        if not self.base_kw > 0:
            raise ValueError("base_kw must be positive")


@dataclass
class IslandReport:
    nodes: list[int]
    slack: int | None
    capacity_kw: float
    demand_kw: float
    energized: bool

    @property
    def overloaded(self) -> bool:
        return self.energized and self.demand_kw > self.capacity_kw


@dataclass
class PowerFlowResult:
    voltages: np.ndarray       # (n_nodes, 3), 0 on de-energized / absent phases
    branch_flows: np.ndarray   # (n_lines,), summed over phases
    phase_flows: np.ndarray    # (n_lines, 3)
    injections: np.ndarray     # (n_nodes, 3) net injection per phase
    served: np.ndarray         # (n_loads,) bool
    converged: bool
    island_report: list[IslandReport] = field(default_factory=list)
    energized: np.ndarray | None = None  # (n_nodes, 3) bool, present and energized phases


def _spread(vec: np.ndarray, node: int, phases: Sequence[int], kw: float, base: float):
    share = kw / base / len(phases)
    for ph in phases:
        vec[node, ph - 1] += share


def solve(g: NetworkGraph, switch_states: Sequence[bool] | None = None,
          outage: Iterable[int] = (), load_states: Sequence[bool] | None = None,
          cfg: SolverConfig = SolverConfig()) -> PowerFlowResult:
    outage = tuple(outage)
    alive = in_service(g, switch_states, outage)
    A = effective_adjacency(g, switch_states, outage)
    connected = (np.ones(len(g.loads), bool) if load_states is None
                 else np.asarray(load_states, bool))
    if connected.shape != (len(g.loads),):
        raise ValueError(f"expected {len(g.loads)} load states, got {connected.shape}")

    n = g.n_nodes
    V = np.zeros((n, 3))
    inj = np.zeros((n, 3))
    phase_flows = np.zeros((g.n_lines, 3))
    served = np.zeros(len(g.loads), bool)
    reports = []
    converged = True

    comp_of = np.empty(n, dtype=np.intp)
    comps = islands(A)
    for c, nodes in enumerate(comps):
        comp_of[nodes] = c

    ders_in = [[] for _ in comps]
    for d in g.ders:
        if d.enabled:
            ders_in[comp_of[g.node(d.bus_id)]].append(d)
    loads_in = [[] for _ in comps]
    for k, ld in enumerate(g.loads):
        if connected[k]:
            loads_in[comp_of[g.node(ld.bus_id)]].append(k)

    sub = g.substation
    for c, nodes in enumerate(comps):
        forming = [d for d in ders_in[c] if d.grid_forming]
        has_sub = comp_of[sub] == c
        demand = float(sum(g.loads[k].total_kw for k in loads_in[c]))
        if has_sub:
            slack, capacity = sub, float("inf")
        elif forming:
            best = min(forming, key=lambda d: (-d.rating_kw, d.bus_id))
            slack = g.node(best.bus_id)
            capacity = float(sum(d.rating_kw for d in ders_in[c]))
        else:
            reports.append(IslandReport(nodes, None, 0.0, demand, False))
            continue
        report = IslandReport(nodes, slack, capacity, demand, True)
        reports.append(report)
        if report.overloaded:
            converged = False

        for k in loads_in[c]:
            ld = g.loads[k]
            served[k] = True
            _spread(inj, g.node(ld.bus_id), ld.phases, -ld.total_kw, cfg.base_kw)
        if has_sub:
            for d in ders_in[c]:
                _spread(inj, g.node(d.bus_id), g.buses[g.node(d.bus_id)].phases,
                        d.rating_kw, cfg.base_kw)
        else:
            feeding = sum(d.rating_kw for d in ders_in[c] if not d.grid_forming)
            forming_total = sum(d.rating_kw for d in forming)
            residual = demand - feeding
            for d in ders_in[c]:
                kw = d.rating_kw if not d.grid_forming else residual * d.rating_kw / forming_total
                _spread(inj, g.node(d.bus_id), g.buses[g.node(d.bus_id)].phases, kw, cfg.base_kw)
        # the slack absorbs whatever balances the island
        inj[slack] = 0.0
        inj[slack] = -inj[nodes].sum(axis=0)

        _solve_island(g, nodes, slack, alive, inj, V, phase_flows, cfg.v_slack)

    live = np.zeros(n, bool)
    for r in reports:
        if r.energized:
            live[r.nodes] = True
    energized = g.phase_mask & live[:, None]
    V *= energized
    return PowerFlowResult(V, phase_flows.sum(axis=1), phase_flows, inj, served, converged,
                           reports, energized)


def _solve_island(g, nodes, slack, alive, inj, V, phase_flows, v_slack):
    local = {v: a for a, v in enumerate(nodes)}
    m = len(nodes)
    lines = [k for k in np.flatnonzero(alive) if g.line_ends[k, 0] in local]
    volts = np.full((m, 3), v_slack)
    if m > 1:
        G = np.zeros((m, m))
        for k in lines:
            a, b = local[g.line_ends[k, 0]], local[g.line_ends[k, 1]]
            y = 1.0 / g.lines[k].r_pu
            G[a, a] += y
            G[b, b] += y
            G[a, b] -= y
            G[b, a] -= y
        free = [a for a in range(m) if nodes[a] != slack]
        try:
            u = np.linalg.solve(G[np.ix_(free, free)], inj[[nodes[a] for a in free]])
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular island system at slack {slack}") from exc
        volts[free] += u
    V[nodes] = volts
    for k in lines:
        i, j = g.line_ends[k]
        phase_flows[k] = (volts[local[i]] - volts[local[j]]) / g.lines[k].r_pu


def energy_supplied(result: PowerFlowResult, g: NetworkGraph) -> float:
    """Served load as a fraction of total network demand."""
    total = g.total_demand_kw
    if total <= 0:
        raise InvalidNetworkError("network has zero total demand")
    served = sum(ld.total_kw for ld, s in zip(g.loads, result.served) if s)
    return float(served / total)
