"""Distribution-network graph model.

Buses are graph nodes and lines are edges.  Switch states and line outages are
never stored on the graph itself; they are passed explicitly to the topology
queries so a single :class:`NetworkGraph` can be shared read-only.

Network file format (UTF-8)::

    # comment
    [buses]
    id=1, name=sourcebus, phases=123, substation=yes
    [lines]
    id=1, from=1, to=2, r_pu=0.01, x_pu=0.02
    [switches]
    line=1, kind=sectionalizing, default=closed
    [loads]
    bus=2, p_kw=40, phases=1, sheddable=yes
    [ders]
    bus=2, kw=250, mode=grid_forming

``phases`` is a string of phase digits.  ``default`` and load ``phases`` are
optional (switch kind decides the default, loads take the bus phases).
"""
from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

SECTIONS = ("buses", "lines", "switches", "loads", "ders")
SWITCH_KINDS = ("sectionalizing", "tie")
DER_MODES = ("grid_forming", "grid_feeding")

_FIELDS = {
    "buses": ({"id", "name", "phases", "substation"}, set()),
    "lines": ({"id", "from", "to", "r_pu", "x_pu"}, set()),
    "switches": ({"line", "kind"}, {"default"}),
    "loads": ({"bus", "p_kw", "sheddable"}, {"phases"}),
    "ders": ({"bus", "kw", "mode"}, set()),
}


class NetworkFormatError(ValueError):
    """Raised for malformed or inconsistent network files."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Bus:
    id: int
    name: str
    phases: tuple[int, ...]
    is_substation: bool = False


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    r_pu: float
    x_pu: float = 0.0


@dataclass(frozen=True)
class Switch:
    line_id: int
    kind: str
    default_closed: bool


@dataclass(frozen=True)
class Load:
    bus_id: int
    p_kw: float  # per active phase
    phases: tuple[int, ...]
    sheddable: bool = True

    @property
    def total_kw(self) -> float:
        return self.p_kw * len(self.phases)


@dataclass(frozen=True)
class Der:
    bus_id: int
    rating_kw: float
    mode: str
    enabled: bool = True

    @property
    def grid_forming(self) -> bool:
        return self.mode == "grid_forming"


@dataclass(frozen=True)
class NetworkGraph:
    """Immutable network description.

    Node indices follow the order of ``buses``; switches are kept sorted by
    line id, which is also the order of switch action slots.
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    switches: tuple[Switch, ...] = ()
    loads: tuple[Load, ...] = ()
    ders: tuple[Der, ...] = ()
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {b.id: i for i, b in enumerate(self.buses)})

    @property
    def n_nodes(self) -> int:
        return len(self.buses)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    def node(self, bus_id: int) -> int:
        try:
            return self._index[bus_id]
        except KeyError:
            raise KeyError(f"unknown bus id {bus_id}") from None

    @cached_property
    def line_index(self) -> dict[int, int]:
        return {ln.id: k for k, ln in enumerate(self.lines)}

    @cached_property
    def line_ends(self) -> np.ndarray:
        """(n_lines, 2) array of node indices."""
        return np.array(
            [(self._index[ln.from_bus], self._index[ln.to_bus]) for ln in self.lines],
            dtype=np.intp,
        ).reshape(-1, 2)

    @cached_property
    def substation(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.is_substation)

    @cached_property
    def sheddable_loads(self) -> tuple[int, ...]:
        """Indices into ``loads`` of loads that own an action slot."""
        return tuple(k for k, ld in enumerate(self.loads) if ld.sheddable)

    @cached_property
    def total_demand_kw(self) -> float:
        return float(sum(ld.total_kw for ld in self.loads))

    @cached_property
    def phase_mask(self) -> np.ndarray:
        """(n_nodes, 3) boolean, True where the bus carries the phase."""
        m = np.zeros((self.n_nodes, 3), dtype=bool)
        for i, b in enumerate(self.buses):
            for ph in b.phases:
                m[i, ph - 1] = True
        return m

    def default_switch_states(self) -> np.ndarray:
        return np.array([s.default_closed for s in self.switches], dtype=bool)

    def base_adjacency(self) -> np.ndarray:
        """Adjacency with every line in service, switch states ignored (read-only)."""
        return self._base_adjacency

    @cached_property
    def _base_adjacency(self) -> np.ndarray:
        A = _adjacency(self.n_nodes, self.line_ends)
        A.flags.writeable = False
        return A


def _adjacency(n: int, ends: np.ndarray) -> np.ndarray:
    A = np.zeros((n, n), dtype=np.int8)
    if len(ends):
        A[ends[:, 0], ends[:, 1]] = 1
        A[ends[:, 1], ends[:, 0]] = 1
    return A


# ---------------------------------------------------------------- parsing


def _parse_bool(text: str, lineno: int) -> bool:
    t = text.strip().lower()
    if t in ("1", "yes", "true", "y"):
        return True
    if t in ("0", "no", "false", "n"):
        return False
    raise NetworkFormatError(f"expected boolean, got {text!r}", lineno)


def _parse_phases(text: str, lineno: int) -> tuple[int, ...]:
    try:
        phases = tuple(sorted({int(c) for c in text.strip()}))
    except ValueError:
        raise NetworkFormatError(f"bad phase string {text!r}", lineno) from None
    if not phases or any(p not in (1, 2, 3) for p in phases):
        raise NetworkFormatError(f"bad phase string {text!r}", lineno)
    return phases


def _parse_record(body: str, section: str, lineno: int) -> dict[str, str]:
    rec = {}
    for part in body.split(","):
        if "=" not in part:
            raise NetworkFormatError(f"expected key=value, got {part.strip()!r}", lineno)
        key, val = (s.strip() for s in part.split("=", 1))
        if key in rec:
            raise NetworkFormatError(f"repeated field {key!r}", lineno)
        rec[key] = val
    required, optional = _FIELDS[section]
    missing = required - rec.keys()
    if missing:
        raise NetworkFormatError(f"missing field(s) {sorted(missing)} in [{section}]", lineno)
    extra = rec.keys() - required - optional
    if extra:
        raise NetworkFormatError(f"unknown field(s) {sorted(extra)} in [{section}]", lineno)
    return rec


def load_network(text: str) -> NetworkGraph:
    """Parse network-file contents into a validated :class:`NetworkGraph`."""
    records: dict[str, list[tuple[int, dict[str, str]]]] = {s: [] for s in SECTIONS}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("["):
            if not body.endswith("]") or body[1:-1].strip() not in SECTIONS:
                raise NetworkFormatError(f"unknown section header {body!r}", lineno)
            section = body[1:-1].strip()
            continue
        if section is None:
            raise NetworkFormatError("record outside of a section", lineno)
        records[section].append((lineno, _parse_record(body, section, lineno)))

    def num(rec, key, lineno, kind=float):
        try:
            return kind(rec[key])
        except ValueError:
            raise NetworkFormatError(f"field {key!r}: cannot parse {rec[key]!r}", lineno) from None

    buses = []
    seen = set()
    for lineno, rec in records["buses"]:
        bid = num(rec, "id", lineno, int)
        if bid in seen:
            raise NetworkFormatError(f"duplicate bus id {bid}", lineno)
        seen.add(bid)
        buses.append(Bus(bid, rec["name"], _parse_phases(rec["phases"], lineno),
                         _parse_bool(rec["substation"], lineno)))
    if not buses:
        raise NetworkFormatError("network has no buses")
    n_sub = sum(b.is_substation for b in buses)
    if n_sub != 1:
        raise NetworkFormatError(f"expected exactly one substation, found {n_sub}")
    bus_phases = {b.id: b.phases for b in buses}

    def bus_ref(rec, key, lineno):
        bid = num(rec, key, lineno, int)
        if bid not in bus_phases:
            raise NetworkFormatError(f"dangling reference to bus {bid}", lineno)
        return bid

    lines = []
    seen = set()
    for lineno, rec in records["lines"]:
        lid = num(rec, "id", lineno, int)
        if lid in seen:
            raise NetworkFormatError(f"duplicate line id {lid}", lineno)
        seen.add(lid)
        f, t = bus_ref(rec, "from", lineno), bus_ref(rec, "to", lineno)
        if f == t:
            raise NetworkFormatError(f"line {lid} is a self-loop", lineno)
        r, x = num(rec, "r_pu", lineno), num(rec, "x_pu", lineno)
        if not r > 0:
            raise NetworkFormatError(f"line {lid}: r_pu must be positive", lineno)
        if x < 0:
            raise NetworkFormatError(f"line {lid}: x_pu must be non-negative", lineno)
        lines.append(Line(lid, f, t, r, x))

    switches = []
    switched = set()
    for lineno, rec in records["switches"]:
        lid = num(rec, "line", lineno, int)
        if lid not in seen:
            raise NetworkFormatError(f"dangling reference to line {lid}", lineno)
        if lid in switched:
            raise NetworkFormatError(f"second switch on line {lid}", lineno)
        switched.add(lid)
        kind = rec["kind"].strip().lower()
        if kind not in SWITCH_KINDS:
            raise NetworkFormatError(f"unknown switch kind {kind!r}", lineno)
        if "default" in rec:
            d = rec["default"].strip().lower()
            if d not in ("open", "closed"):
                raise NetworkFormatError(f"switch default must be open/closed, got {d!r}", lineno)
            closed = d == "closed"
        else:
            closed = kind == "sectionalizing"
        switches.append(Switch(lid, kind, closed))
    switches.sort(key=lambda s: s.line_id)

    loads = []
    for lineno, rec in records["loads"]:
        bid = bus_ref(rec, "bus", lineno)
        p = num(rec, "p_kw", lineno)
        if p < 0:
            raise NetworkFormatError("load p_kw must be non-negative", lineno)
        phases = _parse_phases(rec["phases"], lineno) if "phases" in rec else bus_phases[bid]
        if not set(phases) <= set(bus_phases[bid]):
            raise NetworkFormatError(f"load phases {phases} not carried by bus {bid}", lineno)
        loads.append(Load(bid, p, phases, _parse_bool(rec["sheddable"], lineno)))

    ders = []
    for lineno, rec in records["ders"]:
        bid = bus_ref(rec, "bus", lineno)
        kw = num(rec, "kw", lineno)
        if not kw > 0:
            raise NetworkFormatError("DER rating must be positive", lineno)
        mode = rec["mode"].strip().lower()
        if mode not in DER_MODES:
            raise NetworkFormatError(f"unknown DER mode {mode!r}", lineno)
        ders.append(Der(bid, kw, mode))

    return NetworkGraph(tuple(buses), tuple(lines), tuple(switches), tuple(loads), tuple(ders))


def read_network(path) -> NetworkGraph:
    with open(path, encoding="utf-8") as fh:
        return load_network(fh.read())


def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_network(g: NetworkGraph) -> str:
    """Canonical text form; ``load_network`` of the result equals ``g``."""
    out = ["[buses]"]
    for b in g.buses:
        out.append(f"id={b.id}, name={b.name}, phases={''.join(map(str, b.phases))}, "
                   f"substation={'yes' if b.is_substation else 'no'}")
    out.append("[lines]")
    for ln in g.lines:
        out.append(f"id={ln.id}, from={ln.from_bus}, to={ln.to_bus}, "
                   f"r_pu={_fmt(ln.r_pu)}, x_pu={_fmt(ln.x_pu)}")
    out.append("[switches]")
    for s in g.switches:
        out.append(f"line={s.line_id}, kind={s.kind}, default={'closed' if s.default_closed else 'open'}")
    out.append("[loads]")
    for ld in g.loads:
        out.append(f"bus={ld.bus_id}, p_kw={_fmt(ld.p_kw)}, phases={''.join(map(str, ld.phases))}, "
                   f"sheddable={'yes' if ld.sheddable else 'no'}")
    out.append("[ders]")
    for d in g.ders:
        out.append(f"bus={d.bus_id}, kw={_fmt(d.rating_kw)}, mode={d.mode}")
    return "\n".join(out) + "\n"


def network_hash(g: NetworkGraph) -> str:
    return hashlib.sha256(serialize_network(g).encode()).hexdigest()


# ---------------------------------------------------------------- topology


def in_service(g: NetworkGraph, switch_states: Sequence[bool] | None = None,
               outage: Iterable[int] = ()) -> np.ndarray:
    """Boolean per line: not failed and either unswitched or switch closed."""
    states = g.default_switch_states() if switch_states is None else np.asarray(switch_states, bool)
    if states.shape != (len(g.switches),):
        raise ValueError(f"expected {len(g.switches)} switch states, got {states.shape}")
    alive = np.ones(g.n_lines, dtype=bool)
    for sw, closed in zip(g.switches, states):
        if not closed:
            alive[g.line_index[sw.line_id]] = False
    for lid in outage:
        try:
            alive[g.line_index[lid]] = False
        except KeyError:
            raise ValueError(f"unknown line id {lid} in outage") from None
    return alive


def effective_adjacency(g: NetworkGraph, switch_states: Sequence[bool] | None = None,
                        outage: Iterable[int] = ()) -> np.ndarray:
    """Binary symmetric adjacency of in-service lines (zero diagonal)."""
    alive = in_service(g, switch_states, outage)
    return _adjacency(g.n_nodes, g.line_ends[alive])


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, x: int, y: int) -> bool:
        rx, ry = self.find(x), self.find(y)
        if rx == ry:
            return False
        if self.rank[rx] < self.rank[ry]:
            rx, ry = ry, rx
        self.parent[ry] = rx
        if self.rank[rx] == self.rank[ry]:
            self.rank[rx] += 1
        return True


def islands(adjacency: np.ndarray) -> list[list[int]]:
    """Connected components, each sorted, ordered by smallest member."""
    A = np.asarray(adjacency)
    n = A.shape[0]
    uf = UnionFind(n)
    for i, j in zip(*np.nonzero(np.triu(A, 1))):
        uf.union(int(i), int(j))
    groups: dict[int, list[int]] = {}
    for v in range(n):
        groups.setdefault(uf.find(v), []).append(v)
    return sorted(groups.values(), key=lambda c: c[0])


def hop_distances(adjacency: np.ndarray) -> np.ndarray:
    """All-pairs hop counts; ``inf`` between disconnected nodes."""
    A = np.asarray(adjacency)
    if A.shape[0] == 0:
        return np.zeros((0, 0))
    return shortest_path(csr_matrix(A, dtype=float), unweighted=True, directed=False)


def bfs_hops(adjacency: np.ndarray, source: int, limit: int | None = None) -> dict[int, int]:
    """Hop distance from ``source`` to every node reachable within ``limit``."""
    A = np.asarray(adjacency)
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        if limit is not None and dist[u] >= limit:
            continue
        for v in np.flatnonzero(A[u]):
            v = int(v)
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def k_hop_subgraph(adjacency: np.ndarray, node: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes within ``k`` hops of ``node`` and their induced adjacency.

    Returns ``(nodes, sub_adjacency)`` with ``nodes`` sorted ascending.
    """
    A = np.asarray(adjacency)
    if not 0 <= node < A.shape[0]:
        raise IndexError(f"unknown node {node}")
    if k < 0:
        raise ValueError("hop radius must be non-negative")
    nodes = np.array(sorted(bfs_hops(A, node, k)), dtype=np.intp)
    return nodes, A[np.ix_(nodes, nodes)]


def graph_diameter(adjacency: np.ndarray) -> int:
    """Largest hop distance inside the largest connected component."""
    A = np.asarray(adjacency)
    if A.shape[0] == 0:
        raise ValueError("empty graph")
    comp = max(islands(A), key=len)
    D = hop_distances(A[np.ix_(comp, comp)])
    return int(D.max())
