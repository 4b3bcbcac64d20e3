"""
dlsim Topology — The communication graph G and the neighbor sets nn(v).

A Topology is undirected, connected, and stores every user in its own
neighbor set (v ∈ nn(v)), so the aggregation step of D-PSGD is a plain mean
over nn(v). Graph families are generated with networkx; random families are
regenerated (never repaired) until connected, within a fixed restart budget.

Constructors:
    chain(n)                  path u_0 − u_1 − … − u_{n−1}
    torus(rows, cols)         2-D wraparound grid, 4 neighbors each
    random_regular(rng, n, d) d random neighbors each
    expander(rng, n)          Erdős–Rényi with p = ln(n)/n
    complete(n)               everyone connected
    star(n, center)           center connected to every leaf
    from_edge_list(path)      "u v" lines, 0-based, '#' comments
"""

import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from .errors import RunIOError, TopologyError
from .numkit import Rng

logger = logging.getLogger("dlsim.topology")

RESTART_BUDGET = 1000


class Topology:
    """Immutable undirected graph over users 0..n−1 with explicit self-loops."""

    __slots__ = ("n", "adjacency", "name")

    def __init__(self, n: int, adjacency: Sequence[Sequence[int]], name: str = "custom"):
        self.n = n
        self.adjacency: Tuple[Tuple[int, ...], ...] = tuple(
            tuple(sorted(set(neigh) | {v})) for v, neigh in enumerate(adjacency)
        )
        self.name = name
        self._validate()

    @classmethod
    def from_graph(cls, graph: nx.Graph, name: str) -> "Topology":
        n = graph.number_of_nodes()
        if set(graph.nodes) != set(range(n)):
            raise TopologyError(f"{name}: nodes must be labelled 0..{n - 1}")
        adjacency = [sorted(graph.neighbors(v)) for v in range(n)]
        return cls(n, adjacency, name=name)

    def _validate(self):
        if len(self.adjacency) != self.n:
            raise TopologyError(f"{self.name}: adjacency has {len(self.adjacency)} rows for n={self.n}")
        for v, neigh in enumerate(self.adjacency):
            for u in neigh:
                if not 0 <= u < self.n:
                    raise TopologyError(f"{self.name}: neighbor {u} of {v} out of range")
                if v not in self.adjacency[u]:
                    raise TopologyError(f"{self.name}: edge {v}->{u} is not symmetric")
        if self.n < 1:
            raise TopologyError(f"{self.name}: a topology needs at least one user")
        graph = self.to_graph()
        if not nx.is_connected(graph):
            components = sorted(sorted(c) for c in nx.connected_components(graph))
            raise TopologyError(
                f"{self.name}: graph is disconnected into {len(components)} components: {components}",
                components=components,
            )

    # ── Queries ──────────────────────────────────────────────────────

    def neighbors(self, v: int) -> Tuple[int, ...]:
        """nn(v), including v itself."""
        return self.adjacency[v]

    def peers(self, v: int) -> Tuple[int, ...]:
        """nn(v) without v."""
        return tuple(u for u in self.adjacency[v] if u != v)

    def degree(self, v: int) -> int:
        """|nn(v)| (counts v itself)."""
        return len(self.adjacency[v])

    def covers(self, attacker: int, victim: int) -> bool:
        """nn(victim) ⊆ nn(attacker)."""
        return set(self.adjacency[victim]) <= set(self.adjacency[attacker])

    def edges(self) -> List[Tuple[int, int]]:
        return [(v, u) for v in range(self.n) for u in self.adjacency[v] if v < u]

    def mean_degree(self) -> float:
        """Average number of non-self neighbors."""
        return sum(len(a) - 1 for a in self.adjacency) / self.n

    def mixing_matrix(self) -> np.ndarray:
        """W[v][u] = 1/|nn(v)| for u ∈ nn(v), else 0."""
        w = np.zeros((self.n, self.n))
        for v, neigh in enumerate(self.adjacency):
            w[v, list(neigh)] = 1.0 / len(neigh)
        return w

    def to_graph(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n))
        graph.add_edges_from(self.edges())
        return graph

    def to_dict(self) -> Dict[str, object]:
        return {"name": self.name, "n": self.n, "edges": [list(e) for e in self.edges()]}

    def __repr__(self):
        return f"<Topology {self.name} n={self.n} mean_degree={self.mean_degree():.2f}>"


# ── Deterministic Families ───────────────────────────────────────────


def chain(n: int) -> Topology:
    if n < 2:
        raise TopologyError(f"chain needs n ≥ 2, got {n}")
    return Topology.from_graph(nx.path_graph(n), name=f"chain-{n}")


def torus(rows: int, cols: int) -> Topology:
    if rows < 3 or cols < 3:
        raise TopologyError(f"torus needs rows, cols ≥ 3 (got {rows}×{cols}); smaller grids duplicate edges")
    grid = nx.grid_2d_graph(rows, cols, periodic=True)
    graph = nx.relabel_nodes(grid, {(i, j): i * cols + j for i, j in grid.nodes})
    return Topology.from_graph(graph, name=f"torus-{rows * cols}")


def complete(n: int) -> Topology:
    if n < 1:
        raise TopologyError(f"complete needs n ≥ 1, got {n}")
    return Topology.from_graph(nx.complete_graph(n), name=f"complete-{n}")


def star(n: int, center: int = 0) -> Topology:
    if n < 2 or not 0 <= center < n:
        raise TopologyError(f"star needs n ≥ 2 and 0 ≤ center < n, got n={n}, center={center}")
    graph = nx.Graph()
    graph.add_nodes_from(range(n))
    graph.add_edges_from((center, v) for v in range(n) if v != center)
    return Topology.from_graph(graph, name=f"star-{n}")


# ── Random Families ──────────────────────────────────────────────────


def _regenerate(rng: Rng, name: str, make) -> Topology:
    for attempt in range(RESTART_BUDGET):
        graph = make(rng.int_seed(attempt))
        if nx.is_connected(graph):
            if attempt:
                logger.debug(f"{name}: connected sample after {attempt + 1} attempts")
            return Topology.from_graph(graph, name=name)
        if attempt == 100:
            logger.warning(f"{name}: still disconnected after 100 attempts")
    raise TopologyError(
        f"{name}: no connected sample within {RESTART_BUDGET} attempts", attempts=RESTART_BUDGET
    )


def random_regular(rng: Rng, n: int, d: int) -> Topology:
    """d-regular simple graph (pairing model with restarts), resampled until connected."""
    if (n * d) % 2:
        raise TopologyError(f"regular-({n},{d}) is infeasible: n·d must be even")
    if d < 2 or d >= n:
        raise TopologyError(f"regular-({n},{d}) needs 2 ≤ d < n")
    return _regenerate(rng, f"regular-({n},{d})", lambda seed: nx.random_regular_graph(d, n, seed=seed))


def expander(rng: Rng, n: int) -> Topology:
    """Erdős–Rényi graph with edge probability ln(n)/n, resampled until connected."""
    if n < 4:
        raise TopologyError(f"expander needs n ≥ 4, got {n}")
    p = math.log(n) / n
    return _regenerate(rng, f"expander-{n}", lambda seed: nx.gnp_random_graph(n, p, seed=seed))


# ── Edge Lists ───────────────────────────────────────────────────────


def from_edge_list(path, n: Optional[int] = None) -> Topology:
    """
    Read whitespace-separated ``u v`` pairs (0-based). Duplicates are merged,
    edges symmetrized and self-loops added. ``n`` defaults to max index + 1.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise RunIOError(str(e), path=str(path))

    edges = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise TopologyError(f"{path}:{line_no}: expected 'u v', got {line!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise TopologyError(f"{path}:{line_no}: indices must be integers")
        if u < 0 or v < 0 or (n is not None and (u >= n or v >= n)):
            raise TopologyError(f"{path}:{line_no}: index out of range in {line!r}")
        edges.append((u, v))

    if n is None:
        n = 1 + max((max(e) for e in edges), default=-1)
    graph = nx.Graph()
    graph.add_nodes_from(range(n))
    graph.add_edges_from((u, v) for u, v in edges if u != v)
    return Topology.from_graph(graph, name=path.stem)


# ── Distances ────────────────────────────────────────────────────────


def shortest_path_distances(topology: Topology) -> np.ndarray:
    """All-pairs hop counts by BFS (self-loops ignored)."""
    dist = np.zeros((topology.n, topology.n), dtype=np.int64)
    for source, lengths in nx.all_pairs_shortest_path_length(topology.to_graph()):
        for target, hops in lengths.items():
            dist[source, target] = hops
    return dist


# ── Descriptors ──────────────────────────────────────────────────────


def build(descriptor: Dict[str, object], n_users: int, rng: Rng) -> Topology:
    """Construct a topology from a config descriptor such as ``{"kind": "torus", "rows": 6, "cols": 6}``."""
    kind = descriptor.get("kind")
    if kind == "chain":
        topo = chain(n_users)
    elif kind == "torus":
        topo = torus(int(descriptor["rows"]), int(descriptor["cols"]))
    elif kind == "regular":
        topo = random_regular(rng, n_users, int(descriptor["d"]))
    elif kind == "expander":
        topo = expander(rng, n_users)
    elif kind == "complete":
        topo = complete(n_users)
    elif kind == "star":
        topo = star(n_users, int(descriptor.get("center", 0)))
    elif kind == "edge-list":
        topo = from_edge_list(descriptor["path"], n=n_users)
    else:
        raise TopologyError(f"unknown topology kind {kind!r}")
    if topo.n != n_users:
        raise TopologyError(f"{topo.name} has {topo.n} users but n_users is {n_users}")
    logger.info(f"Topology {topo.name}: {topo.n} users, mean degree {topo.mean_degree():.2f}")
    return topo
