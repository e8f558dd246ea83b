"""Outage-management MDP over the network graph.

Action layout: one slot per switch (sorted by line id; ON = closed) followed
by one slot per sheddable load (file order; ON = connected).  Actions are
target states, not toggles.  Switch slots on failed lines are masked and held
open whatever the action says.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from . import powerflow
from .grid import NetworkGraph, effective_adjacency
from .tda import DiagramCache, laplacian, ph_weights_from_adjacency, topology_signature

REFRESH_MODES = ("per_episode", "per_step")
VARIANTS = ("ph", "plain")


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 8
    v_min: float = 0.95
    v_max: float = 1.05
    ph_refresh: str = "per_episode"
    k: int = 2
    variant: str = "ph"

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be below v_max")
        if self.ph_refresh not in REFRESH_MODES:
            raise ValueError(f"ph_refresh must be one of {REFRESH_MODES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.k < 1:
            raise ValueError("PH hop radius must be >= 1")


@dataclass
class Observation:
    V: np.ndarray             # (n_nodes, 3) per-unit voltages
    e_supp: float
    v_viol: float
    flows: np.ndarray         # (n_lines,) branch flows b_e in line-id order
    config: np.ndarray        # switch states then load connection states
    outage_mask: np.ndarray   # (n_switches,) True on failed switched lines
    action_mask: np.ndarray   # (n_actions,) outage_mask padded with False for load slots
    converged: bool
    L: np.ndarray = field(repr=False, default=None)  # graph operator for the policy

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.V)) and np.isfinite(self.e_supp)
                    and np.isfinite(self.v_viol) and np.all(np.isfinite(self.flows)))


def compute_v_viol(V: np.ndarray, active: np.ndarray, v_min: float = 0.95,
                   v_max: float = 1.05) -> float:
    """Out-of-band deviation summed over active phases, divided by 3 * n_nodes."""
    V = np.asarray(V, dtype=float)
    active = np.asarray(active, bool)
    dev = np.maximum(V - v_max, 0.0) + np.maximum(v_min - V, 0.0)
    return float(dev[active].sum() / (3 * V.shape[0]))


def reward_from(e_supp: float, v_viol: float, c_viol: int) -> float:
    return -1.0 if c_viol else e_supp - v_viol


class GridEnv:
    def __init__(self, g: NetworkGraph, cfg: EnvConfig = EnvConfig(),
                 solver: powerflow.SolverConfig = powerflow.SolverConfig(),
                 cache: DiagramCache | None = None, weight_cache: dict | None = None):
        self.g = g
        self.cfg = cfg
        self.solver = solver
        self.cache = DiagramCache() if cache is None else cache
        # signature -> TopologicalWeights, e.g. preloaded from a weight-cache file
        self.weight_cache = {} if weight_cache is None else weight_cache
        self.n_switches = len(g.switches)
        self.n_actions = self.n_switches + len(g.sheddable_loads)
        self._switch_pos = {s.line_id: k for k, s in enumerate(g.switches)}
        self.outage: tuple[int, ...] = ()
        self.t = 0

    # -- helpers --------------------------------------------------------------

    def _operator(self, adjacency: np.ndarray) -> np.ndarray:
        if self.cfg.variant == "plain":
            return laplacian(adjacency.astype(float))
        sig = topology_signature(adjacency)
        w = self.weight_cache.get(sig)
        if w is None or w.k != self.cfg.k:
            w = ph_weights_from_adjacency(adjacency, self.cfg.k, self.cache)
            self.weight_cache[sig] = w
        return laplacian(w)

    def _observe(self) -> tuple[Observation, dict]:
        res = powerflow.solve(self.g, self.switch_states, self.outage, self.load_states, self.solver)
        e_supp = powerflow.energy_supplied(res, self.g)
        v_viol = compute_v_viol(res.voltages, res.energized, self.cfg.v_min, self.cfg.v_max)
        if self.cfg.ph_refresh == "per_step" or self._L is None:
            self._L = self._operator(effective_adjacency(self.g, self.switch_states, self.outage))
        config = np.concatenate([self.switch_states, self.load_states]).astype(np.int8)
        action_mask = np.concatenate([self.outage_mask, np.zeros(self.n_actions - self.n_switches, bool)])
        obs = Observation(res.voltages, e_supp, v_viol, res.branch_flows.copy(), config,
                          self.outage_mask.copy(), action_mask, res.converged, self._L)
        c_viol = int(not res.converged or not obs.is_finite())
        return obs, {"e_supp": e_supp, "v_viol": v_viol, "c_viol": c_viol}

    # -- MDP ------------------------------------------------------------------

    def reset(self, scenario=None) -> Observation:
        """Start an episode; ``scenario`` needs a ``failed_lines`` attribute (or None)."""
        outage = () if scenario is None else tuple(sorted(scenario.failed_lines))
        unknown = [lid for lid in outage if lid not in self.g.line_index]
        if unknown:
            raise ValueError(f"scenario references unknown lines {unknown}")
        self.outage = outage
        self.outage_mask = np.zeros(self.n_switches, bool)
        for lid in outage:
            if lid in self._switch_pos:
                self.outage_mask[self._switch_pos[lid]] = True
        self.switch_states = self.g.default_switch_states() & ~self.outage_mask
        self.load_states = np.ones(len(self.g.loads), bool)
        self.t = 0
        self._L = None
        obs, info = self._observe()
        self.last_info = info
        return obs

    def apply_action(self, action) -> None:
        a = np.asarray(action).astype(bool)
        if a.shape != (self.n_actions,):
            raise ValueError(f"action must have length {self.n_actions}, got {a.shape}")
        self.switch_states = a[:self.n_switches] & ~self.outage_mask
        loads = self.load_states.copy()
        loads[list(self.g.sheddable_loads)] = a[self.n_switches:]
        self.load_states = loads

    def step(self, action):
        self.apply_action(action)
        self.t += 1
        obs, info = self._observe()
        reward = reward_from(info["e_supp"], info["v_viol"], info["c_viol"])
        self.last_info = info
        return obs, reward, self.t >= self.cfg.horizon, info

    # -- persistence ----------------------------------------------------------

    def state_dict(self) -> dict:
        return {"outage": list(self.outage), "switch_states": self.switch_states.astype(int).tolist(),
                "load_states": self.load_states.astype(int).tolist(), "t": self.t}

    def load_state_dict(self, state: dict) -> Observation:
        """Restore a mid-episode state and return the matching observation."""
        self.reset(SimpleNamespace(failed_lines=state["outage"]))
        if self.cfg.ph_refresh == "per_step":
            self._L = None
        self.switch_states = np.array(state["switch_states"], bool)
        self.load_states = np.array(state["load_states"], bool)
        self.t = state["t"]
        obs, self.last_info = self._observe()
        return obs

