"""Persistent homology on k-hop neighbourhoods and topological edge weights.

Every node's neighbourhood is turned into a finite metric space (hop
distances inside the neighbourhood subgraph) and filtered by a Vietoris-Rips
complex up to dimension 2.  Diagrams of neighbouring nodes are compared with
the 2-Wasserstein distance and the edge weight is ``1 / (1 + distance)``.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
import threading
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .grid import NetworkGraph, UnionFind, effective_adjacency, hop_distances, k_hop_subgraph

# cost for forbidden pairings in the augmented assignment problem
_FORBIDDEN = 1e18


@dataclass(frozen=True)
class PersistenceDiagram:
    dim: int
    points: np.ndarray  # (m, 2) rows of (birth, death), lexicographically sorted

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if np.any(pts[:, 1] < pts[:, 0]):
            raise ValueError("persistence point with death < birth")
        pts = pts[pts[:, 1] > pts[:, 0]]
        order = np.lexsort((pts[:, 1], pts[:, 0]))
        object.__setattr__(self, "points", pts[order])

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        return (isinstance(other, PersistenceDiagram) and self.dim == other.dim
                and np.array_equal(self.points, other.points))

    def __hash__(self):
        return hash((self.dim, self.points.tobytes()))


@dataclass(frozen=True)
class TopologicalWeights:
    matrix: np.ndarray
    k: int
    topology_signature: str


def topology_signature(adjacency: np.ndarray) -> str:
    A = np.ascontiguousarray(np.asarray(adjacency) != 0)
    h = hashlib.sha256(str(A.shape).encode())
    h.update(np.packbits(A).tobytes())
    return h.hexdigest()


def hop_distance_matrix(sub_adjacency: np.ndarray) -> np.ndarray:
    D = hop_distances(sub_adjacency)
    if not np.all(np.isfinite(D)):
        raise ValueError("subgraph is disconnected")
    return D


# ---------------------------------------------------------------- filtration


def _check_metric(dist, cap):
    D = np.asarray(dist, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError("distance matrix must be square")
    if D.size and cap < D.max():
        raise ValueError(f"cap {cap} is below the largest distance {D.max()}")
    return D


def _edges(D):
    n = len(D)
    return sorted(((D[i, j], i, j) for i, j in itertools.combinations(range(n), 2)))


def h0_union_find(dist: np.ndarray, cap: float) -> PersistenceDiagram:
    """Zero-dimensional diagram from Kruskal merging (elder rule)."""
    D = _check_metric(dist, cap)
    n = len(D)
    if n == 0:
        return PersistenceDiagram(0, np.empty((0, 2)))
    uf = UnionFind(n)
    # every vertex is born at 0, so each merge kills a bar (0, edge value)
    # whichever component is declared the elder
    pts = []
    for val, i, j in _edges(D):
        if uf.union(i, j):
            pts.append((0.0, val))
    pts.append((0.0, float(cap)))
    return PersistenceDiagram(0, np.array(pts))


def boundary_reduction(dist: np.ndarray, cap: float) -> tuple[PersistenceDiagram, PersistenceDiagram]:
    """Diagrams in dimensions 0 and 1 by Z/2 reduction of the full boundary matrix.

    Simplices are ordered by (filtration value, dimension, vertex tuple); a
    simplex enters at the largest pairwise distance among its vertices.
    Columns are stored as Python integers used as bitsets.
    """
    D = _check_metric(dist, cap)
    n = len(D)
    simplices = [(0.0, 0, (v,)) for v in range(n)]
    simplices += [(D[i, j], 1, (i, j)) for i, j in itertools.combinations(range(n), 2)]
    simplices += [(max(D[i, j], D[i, k], D[j, k]), 2, (i, j, k))
                  for i, j, k in itertools.combinations(range(n), 3)]
    simplices.sort()
    index = {s[2]: pos for pos, s in enumerate(simplices)}

    pivot_owner: dict[int, int] = {}
    reduced: dict[int, int] = {}
    paired = set()
    pts = {0: [], 1: []}
    for pos, (val, dim, verts) in enumerate(simplices):
        if dim == 0:
            continue
        col = 0
        for face in itertools.combinations(verts, dim):
            col ^= 1 << index[face]
        while col:
            low = col.bit_length() - 1
            owner = pivot_owner.get(low)
            if owner is None:
                break
            col ^= reduced[owner]
        if col:
            low = col.bit_length() - 1
            pivot_owner[low] = pos
            reduced[pos] = col
            paired.update((low, pos))
            pts[dim - 1].append((simplices[low][0], val))
    for pos, (val, dim, _) in enumerate(simplices):
        if dim < 2 and pos not in paired:
            pts[dim].append((val, float(cap)))
    return (PersistenceDiagram(0, np.array(pts[0]).reshape(-1, 2)),
            PersistenceDiagram(1, np.array(pts[1]).reshape(-1, 2)))


def vietoris_rips_persistence(dist: np.ndarray, cap: float) -> tuple[PersistenceDiagram, PersistenceDiagram]:
    """(PD0, PD1) of the Rips filtration; the essential H0 bar ends at ``cap``."""
    pd0 = h0_union_find(dist, cap)
    _, pd1 = boundary_reduction(dist, cap)
    return pd0, pd1


# ---------------------------------------------------------------- distances


def _diag_sq(points: np.ndarray) -> np.ndarray:
    return (points[:, 1] - points[:, 0]) ** 2 / 2.0


def wasserstein2(d1: PersistenceDiagram, d2: PersistenceDiagram) -> float:
    """Order-2 Wasserstein distance with Euclidean ground metric.

    Points may be matched to their diagonal projection.  Solved exactly as a
    square assignment problem on the (n1+n2) augmented cost matrix.
    """
    if d1.dim != d2.dim:
        raise ValueError(f"dimension mismatch: {d1.dim} vs {d2.dim}")
    P, Q = d1.points, d2.points
    # canonical argument order makes the floating-point result exactly symmetric
    if (len(P), P.tobytes()) > (len(Q), Q.tobytes()):
        P, Q = Q, P
    n1, n2 = len(P), len(Q)
    if n1 + n2 == 0:
        return 0.0
    C = np.zeros((n1 + n2, n1 + n2))
    C[:n1, :n2] = ((P[:, None, :] - Q[None, :, :]) ** 2).sum(axis=2)
    C[:n1, n2:] = _FORBIDDEN
    C[np.arange(n1), n2 + np.arange(n1)] = _diag_sq(P)
    C[n1:, :n2] = _FORBIDDEN
    C[n1 + np.arange(n2), np.arange(n2)] = _diag_sq(Q)
    rows, cols = linear_sum_assignment(C)
    return float(np.sqrt(math.fsum(C[rows, cols])))


# ---------------------------------------------------------------- node diagrams


class DiagramCache:
    """Memo of node diagrams keyed by (node, topology signature, k).

    Inserts are idempotent, so concurrent get-or-compute calls agree.
    """

    def __init__(self):
        self._store: dict = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._store)

    def get_or_compute(self, key, fn):
        hit = self._store.get(key)
        if hit is not None:
            return hit
        value = fn()
        with self._lock:
            return self._store.setdefault(key, value)


def node_diagrams(adjacency: np.ndarray, node: int, k: int):
    nodes, sub = k_hop_subgraph(adjacency, node, k)
    D = hop_distance_matrix(sub)
    cap = max(float(D.max()), 1.0)
    return vietoris_rips_persistence(D, cap)


def _diagram_distance(a, b) -> float:
    return float(np.hypot(wasserstein2(a[0], b[0]), wasserstein2(a[1], b[1])))


def node_diagram_distance(adjacency: np.ndarray, i: int, j: int, k: int) -> float:
    """Combined distance sqrt(W2(PD0)^2 + W2(PD1)^2) between two node neighbourhoods."""
    if i == j:
        return 0.0
    return _diagram_distance(node_diagrams(adjacency, i, k), node_diagrams(adjacency, j, k))


def ph_weights_from_adjacency(adjacency: np.ndarray, k: int = 2,
                              cache: DiagramCache | None = None) -> TopologicalWeights:
    if k < 1:
        raise ValueError("hop radius must be at least 1")
    A = np.asarray(adjacency)
    sig = topology_signature(A)
    cache = DiagramCache() if cache is None else cache
    W = np.zeros(A.shape)
    diagrams = {}
    for i, j in zip(*np.nonzero(np.triu(A, 1))):
        for v in (int(i), int(j)):
            if v not in diagrams:
                diagrams[v] = cache.get_or_compute((v, sig, k), lambda v=v: node_diagrams(A, v, k))
        w = 1.0 / (1.0 + _diagram_distance(diagrams[int(i)], diagrams[int(j)]))
        W[i, j] = W[j, i] = w
    return TopologicalWeights(W, k, sig)


def ph_edge_weights(g: NetworkGraph, switch_states: Sequence[bool] | None = None,
                    outage: Iterable[int] = (), k: int = 2,
                    cache: DiagramCache | None = None) -> TopologicalWeights:
    """Topological edge weights of the effective (post-switching, post-outage) graph."""
    return ph_weights_from_adjacency(effective_adjacency(g, switch_states, outage), k, cache)


def laplacian(weights) -> np.ndarray:
    """Symmetric normalised Laplacian ``I - D^-1/2 W D^-1/2``.

    Accepts :class:`TopologicalWeights` or a plain weight matrix.  Rows of
    isolated nodes are identity rows.
    """
    W = np.asarray(getattr(weights, "matrix", weights), dtype=float)
    deg = W.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    return np.eye(len(W)) - inv_sqrt[:, None] * W * inv_sqrt[None, :]


# ---------------------------------------------------------------- cache file

WEIGHT_CACHE_FORMAT = "phgrid-weights"
WEIGHT_CACHE_VERSION = 1


def save_weight_cache(path, weights: Iterable[TopologicalWeights], network_hash: str) -> None:
    entries = {}
    k = None
    for w in weights:
        k = w.k
        iu = np.argwhere(np.triu(w.matrix, 1) != 0)
        entries[w.topology_signature] = {
            "n": int(len(w.matrix)),
            "edges": [[int(i), int(j), float(w.matrix[i, j])] for i, j in iu],
        }
    doc = {"format": WEIGHT_CACHE_FORMAT, "version": WEIGHT_CACHE_VERSION,
           "network": network_hash, "k": k, "entries": entries}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_weight_cache(path) -> tuple[str, dict[str, TopologicalWeights]]:
    """Returns ``(network_hash, {signature: weights})``."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != WEIGHT_CACHE_FORMAT or doc.get("version") != WEIGHT_CACHE_VERSION:
        raise ValueError(f"{path}: not a version-{WEIGHT_CACHE_VERSION} weight cache")
    out = {}
    for sig, entry in doc["entries"].items():
        W = np.zeros((entry["n"], entry["n"]))
        for i, j, w in entry["edges"]:
            W[i, j] = W[j, i] = w
        out[sig] = TopologicalWeights(W, doc["k"], sig)
    return doc["network"], out
