"""Localized outage scenarios: generation, validation, disjoint splits, files.

A scenario picks a center bus, a hop radius ``r`` and a severity ``s``; it
fails ``k = max(1, ceil(s * |E_sub|))`` lines drawn without replacement from
the lines inside the radius-``r`` neighbourhood of the center.  Neighbourhoods
are taken on the physical graph (every line, switch states ignored).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import GridEnv
from .grid import NetworkGraph, graph_diameter, hop_distances, k_hop_subgraph

MAX_SEVERITY = 0.3
SCENARIO_HEADER = "seed,center,r,s,line_ids"


class ScenarioError(RuntimeError):
    pass


class NetworkMismatchError(ValueError):
    """Scenario file was generated for a different network."""


@dataclass(frozen=True)
class OutageScenario:
    seed: int
    center: int          # bus id
    radius: int
    severity: float
    failed_lines: tuple  # sorted line ids

    @property
    def k(self) -> int:
        return len(self.failed_lines)

    @property
    def key(self) -> frozenset:
        return frozenset(self.failed_lines)


def failure_count(severity: float, n_sub_lines: int) -> int:
    return max(1, math.ceil(severity * n_sub_lines))


def subgraph_lines(g: NetworkGraph, center_bus: int, radius: int) -> list[int]:
    """Ids of lines with both ends within ``radius`` hops of the center."""
    nodes, _ = k_hop_subgraph(g.base_adjacency(), g.node(center_bus), radius)
    inside = np.zeros(g.n_nodes, bool)
    inside[nodes] = True
    ends = g.line_ends
    return [ln.id for ln, (a, b) in zip(g.lines, ends) if inside[a] and inside[b]]


def select_centers(g: NetworkGraph, m: int = 25, seed=None) -> list[int]:
    """Farthest-point sampling on hop distance; returns bus ids.

    Fully deterministic (ties go to the lowest node index), so ``seed`` has no
    effect; it is accepted for interface symmetry with the other generators.
    """
    n = g.n_nodes
    if m > n:
        raise ValueError(f"cannot pick {m} centers from {n} nodes")
    D = hop_distances(g.base_adjacency())
    D = np.where(np.isfinite(D), D, -1.0)
    ecc = D.max(axis=1)
    chosen = [int(np.argmax(ecc))]
    nearest = D[chosen[0]].copy()
    nearest[D[chosen[0]] < 0] = np.inf
    while len(chosen) < m:
        cand = nearest.copy()
        cand[chosen] = -np.inf
        nxt = int(np.argmax(cand))
        chosen.append(nxt)
        d = np.where(D[nxt] < 0, np.inf, D[nxt])
        nearest = np.minimum(nearest, d)
    return [g.buses[i].id for i in chosen]


def scenario_from_seed(g: NetworkGraph, centers, seed: int, max_radius: int) -> OutageScenario | None:
    rng = np.random.default_rng(seed)
    center = centers[int(rng.integers(len(centers)))]
    radius = int(rng.integers(1, max_radius + 1))
    lines = subgraph_lines(g, center, radius)
    if not lines:
        return None
    s = float(rng.uniform(0.0, MAX_SEVERITY))
    k = failure_count(s, len(lines))
    failed = rng.choice(np.array(lines), size=k, replace=False)
    return OutageScenario(seed, center, radius, s, tuple(sorted(int(x) for x in failed)))


def generate(g: NetworkGraph, centers, n: int, rng: np.random.Generator,
             max_retries: int = 100) -> list[OutageScenario]:
    """``n`` scenarios; each owns a seed drawn from ``rng`` so it can be replayed alone."""
    diam = graph_diameter(g.base_adjacency())
    if diam < 3:
        raise ScenarioError(f"graph diameter {diam} too small for radius sampling")
    max_radius = diam // 3
    out = []
    for _ in range(n):
        for _attempt in range(max_retries):
            sc = scenario_from_seed(g, centers, int(rng.integers(2**63)), max_radius)
            if sc is not None:
                out.append(sc)
                break
        else:
            raise ScenarioError(f"no lines found around centers after {max_retries} draws")
    return out


def validate(scenario: OutageScenario, env: GridEnv) -> bool:
    """True iff the post-outage, pre-action state solves cleanly."""
    env.reset(scenario)
    return env.last_info["c_viol"] == 0


def dedupe(pool) -> list[OutageScenario]:
    seen, out = set(), []
    for sc in pool:
        if sc.key not in seen:
            seen.add(sc.key)
            out.append(sc)
    return out


def split_disjoint(pool, n_test: int, rng: np.random.Generator):
    """Split into (train, test) with no failed-line set shared between them.

    Duplicates (same failed-line set) collapse to their first occurrence.
    Both parts keep the pool order.
    """
    unique = dedupe(pool)
    if n_test > len(unique):
        raise ScenarioError(f"only {len(unique)} distinct scenarios, {n_test} requested for test")
    picked = set(rng.permutation(len(unique))[:n_test].tolist())
    test = [sc for i, sc in enumerate(unique) if i in picked]
    train = [sc for i, sc in enumerate(unique) if i not in picked]
    return train, test


# ---------------------------------------------------------------- files


def write_scenarios(path, scenarios, network_hash: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# network={network_hash}\n{SCENARIO_HEADER}\n")
        for sc in scenarios:
            ids = ";".join(str(x) for x in sc.failed_lines)
            fh.write(f"{sc.seed},{sc.center},{sc.radius},{sc.severity!r},{ids}\n")


def read_scenarios(path, expected_hash: str | None = None) -> tuple[str, list[OutageScenario]]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# network="):
        raise ValueError(f"{path}: missing network hash header")
    net_hash = lines[0].split("=", 1)[1].strip()
    if expected_hash is not None and net_hash != expected_hash:
        raise NetworkMismatchError(f"{path} was generated for network {net_hash[:12]}..., "
                                   f"not {expected_hash[:12]}...")
    if len(lines) < 2 or lines[1].strip() != SCENARIO_HEADER:
        raise ValueError(f"{path}: expected column header {SCENARIO_HEADER!r}")
    out = []
    for lineno, row in enumerate(lines[2:], start=3):
        if not row.strip():
            continue
        try:
            seed, center, r, s, ids = row.split(",")
            failed = tuple(sorted(int(x) for x in ids.split(";") if x))
            out.append(OutageScenario(int(seed), int(center), int(r), float(s), failed))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad scenario record ({exc})") from None
    return net_hash, out
