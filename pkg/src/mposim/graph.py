"""Undirected simple graph shared by the topology generators, the MPO export and search."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph


@dataclass
class Graph:
    """Simple undirected graph over integer node labels.

    ``covers[u]`` lists the nodes whose content ``u`` can answer for (its own,
    plus any content index it keeps for others); nodes absent from the map
    cover only themselves. ``passive`` nodes never receive forwarded search
    messages; they can still originate queries.
    """

    adj: dict[int, set[int]] = field(default_factory=dict)
    covers: dict[int, frozenset[int]] = field(default_factory=dict)
    passive: set[int] = field(default_factory=set)
    notes: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, n: int) -> "Graph":
        return cls(adj={i: set() for i in range(n)})

    @classmethod
    def from_edges(cls, nodes: Iterable[int], edges: Iterable[tuple[int, int]]) -> "Graph":
        g = cls(adj={int(u): set() for u in nodes})
        for u, v in edges:
            g.add_edge(int(u), int(v))
        return g

    @property
    def nodes(self) -> list[int]:
        return sorted(self.adj)

    def __len__(self):
        return len(self.adj)

    def add_node(self, u: int) -> None:
        self.adj.setdefault(u, set())

    def add_edge(self, u: int, v: int) -> bool:
        if u == v:
            raise ValueError(f"self-loop on {u}")
        if v in self.adj[u]:
            return False
        self.adj[u].add(v)
        self.adj[v].add(u)
        return True

    def remove_edge(self, u: int, v: int) -> None:
        self.adj[u].discard(v)
        self.adj[v].discard(u)

    def has_edge(self, u: int, v: int) -> bool:
        return v in self.adj.get(u, ())

    def degree(self, u: int) -> int:
        return len(self.adj[u])

    def edges(self) -> list[tuple[int, int]]:
        return sorted((u, v) for u, nb in self.adj.items() for v in nb if u < v)

    def n_edges(self) -> int:
        return sum(len(nb) for nb in self.adj.values()) // 2

    def coverage(self, u: int) -> frozenset[int]:
        return self.covers.get(u, frozenset((u,)))

    def remove_nodes(self, gone: Iterable[int]) -> "Graph":
        """Copy of the graph without ``gone`` (their edges and index entries vanish)."""
        gone = set(gone)
        adj = {u: {v for v in nb if v not in gone} for u, nb in self.adj.items() if u not in gone}
        covers = {u: frozenset(c - gone) | {u} for u, c in self.covers.items() if u not in gone}
        return Graph(adj, covers, {u for u in self.passive if u not in gone}, dict(self.notes))

    def copy(self) -> "Graph":
        return Graph({u: set(nb) for u, nb in self.adj.items()}, dict(self.covers),
                     set(self.passive), dict(self.notes))

    def csr(self) -> tuple[sparse.csr_matrix, list[int]]:
        labels = self.nodes
        pos = {u: i for i, u in enumerate(labels)}
        rows, cols = [], []
        for u, nb in self.adj.items():
            for v in nb:
                rows.append(pos[u])
                cols.append(pos[v])
        n = len(labels)
        m = sparse.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))
        return m, labels

    def components(self) -> list[list[int]]:
        if not self.adj:
            return []
        m, labels = self.csr()
        k, lab = csgraph.connected_components(m, directed=False)
        comps: list[list[int]] = [[] for _ in range(k)]
        for i, c in enumerate(lab):
            comps[c].append(labels[i])
        return comps

    def is_connected(self) -> bool:
        return len(self.components()) <= 1

    def check_simple(self) -> None:
        for u, nb in self.adj.items():
            if u in nb:
                raise AssertionError(f"self-loop at {u}")
            for v in nb:
                if u not in self.adj[v]:
                    raise AssertionError(f"asymmetric edge {u}->{v}")


def degree_histogram(g: Graph) -> list[tuple[int, int]]:
    """(node, degree) pairs sorted by degree, highest first; ties by node label."""
    return sorted(((u, len(nb)) for u, nb in g.adj.items()), key=lambda t: (-t[1], t[0]))


def write_edge_list(g: Graph, path) -> Path:
    """One edge per line, two integer ids separated by a space, smaller id first.

    Isolated nodes are listed on a ``# nodes`` header so the node set survives.
    """
    path = Path(path)
    lines = [f"# nodes {len(g)}"]
    isolated = [u for u in g.nodes if not g.adj[u]]
    if isolated:
        lines.append("# isolated " + " ".join(map(str, isolated)))
    lines += [f"{u} {v}" for u, v in g.edges()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_edge_list(path) -> Graph:
    g = Graph()
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("# isolated"):
            for tok in line.split()[2:]:
                g.add_node(int(tok))
            continue
        if line.startswith("#"):
            continue
        u, v = (int(t) for t in line.split())
        g.add_node(u)
        g.add_node(v)
        g.add_edge(u, v)
    return g
