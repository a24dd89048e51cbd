"""Flooding (repeated and unrepeated) and k-walker random walk over a Graph.

Hit rule: a node answers a query for file ``f`` when any node it covers
(itself, plus any content index it keeps) hosts ``f``. Passive nodes never
receive forwarded messages, so they only answer for queries they originate.

Single queries go through ``flood`` and ``random_walk``; ``batch_search``
evaluates whole workloads with array operations and produces the same numbers.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .graph import Graph
from .kernel import FileCatalog, RngStream

ALGORITHMS = ("flood_repeated", "flood_unrepeated", "random_walk")


@dataclass
class SearchRequest:
    source: int
    target_file: int
    ttl: int
    algorithm: str = "flood_unrepeated"
    walks: int = 4
    stop_after: int = 1
    no_backtrack: bool = True
    forward_on_hit: bool = False    # flooding: does a node that can answer keep forwarding?

    def __post_init__(self):
        if self.ttl < 0:
            raise ValueError("ttl must be >= 0")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.algorithm == "random_walk" and self.walks < 1:
            raise ValueError("walks must be >= 1")


@dataclass
class SearchResult:
    success: bool
    hops_to_first_hit: int | None
    messages_sent: int
    nodes_disturbed: Counter = field(default_factory=Counter)
    results_found: int = 0


@dataclass
class MetricsSample:
    algorithm: str
    ttls: list
    n_queries: int
    success_rate: dict          # ttl -> fraction
    mean_messages: dict         # ttl -> messages per query
    mean_hops: dict             # ttl -> mean first-hit hops among successes (None if no success)
    total_messages: dict        # ttl -> int
    disturbance: dict           # ttl -> {node: receipts}


def answer_matrix(g: Graph, catalog: FileCatalog, labels: list[int]) -> np.ndarray:
    """Boolean (m+1) x n matrix: row f marks nodes able to answer a query for f."""
    pos = {u: i for i, u in enumerate(labels)}
    hosts = np.zeros((catalog.m + 1, len(labels)), dtype=bool)
    for f, hs in catalog.placement.items():
        for h in hs:
            if h in pos:
                hosts[f, pos[h]] = True
    ans = hosts.copy()
    for u, cov in g.covers.items():
        if u not in pos:
            continue
        idx = [pos[v] for v in cov if v in pos]
        if idx:
            ans[:, pos[u]] |= hosts[:, idx].any(axis=1)
    return ans


def _answers(g: Graph, catalog: FileCatalog, u: int, f: int) -> bool:
    hosts = catalog.placement.get(f, ())
    return any(h in g.coverage(u) for h in hosts) or u in hosts


def _active_neighbors(g: Graph, u: int) -> list[int]:
    return sorted(v for v in g.adj[u] if v not in g.passive)


def flood(g: Graph, catalog: FileCatalog, req: SearchRequest) -> SearchResult:
    """Breadth-synchronous flood; repeated mode forwards every copy it receives.

    A node able to answer replies instead of forwarding (unless
    ``forward_on_hit``), which never changes success or first-hit hops.
    """
    if req.source not in g.adj:
        raise KeyError(f"source {req.source} is not in the graph")
    s, f = req.source, req.target_file
    if _answers(g, catalog, s, f):
        return SearchResult(True, 0, 0, Counter(), 1)
    disturbed: Counter = Counter()
    messages = 0
    first = None
    found = set()
    if req.algorithm == "flood_unrepeated":
        seen = {s}
        frontier = [s]
        for hop in range(1, req.ttl + 1):
            nxt = []
            for u in frontier:
                for v in _active_neighbors(g, u):
                    if v in seen:
                        continue
                    seen.add(v)
                    messages += 1
                    disturbed[v] += 1
                    if _answers(g, catalog, v, f):
                        found.add(v)
                        if first is None:
                            first = hop
                        if not req.forward_on_hit:
                            continue
                    nxt.append(v)
            frontier = nxt
            if not frontier:
                break
    else:
        frontier = [(s, None)]
        for hop in range(1, req.ttl + 1):
            nxt = []
            for u, sender in frontier:
                for v in _active_neighbors(g, u):
                    if v == sender:
                        continue
                    messages += 1
                    disturbed[v] += 1
                    if _answers(g, catalog, v, f):
                        found.add(v)
                        if first is None:
                            first = hop
                        if not req.forward_on_hit:
                            continue
                    nxt.append((v, u))
            frontier = nxt
            if not frontier:
                break
    return SearchResult(first is not None, first, messages, disturbed, len(found))


def _step_choice(nbrs: list[int], prev, rng: RngStream, no_backtrack: bool):
    if no_backtrack and prev is not None and len(nbrs) > 1 and prev in nbrs:
        r = int(rng.integers(len(nbrs) - 1))
        v = nbrs[r]
        return nbrs[-1] if v == prev else v
    return nbrs[int(rng.integers(len(nbrs)))]


def random_walk(g: Graph, catalog: FileCatalog, req: SearchRequest, rng: RngStream) -> SearchResult:
    """``walks`` walkers step in lockstep; a query ends at ``stop_after`` results or ``ttl`` steps."""
    if req.source not in g.adj:
        raise KeyError(f"source {req.source} is not in the graph")
    s, f = req.source, req.target_file
    if _answers(g, catalog, s, f):
        return SearchResult(True, 0, 0, Counter(), 1)
    walkers = [(s, None)] * req.walks
    disturbed: Counter = Counter()
    messages = 0
    first = None
    found = set()
    for hop in range(1, req.ttl + 1):
        nxt = []
        for cur, prev in walkers:
            nbrs = _active_neighbors(g, cur)
            if not nbrs:
                nxt.append((cur, prev))
                continue
            v = _step_choice(nbrs, prev, rng, req.no_backtrack)
            messages += 1
            disturbed[v] += 1
            if _answers(g, catalog, v, f):
                found.add(v)
                if first is None:
                    first = hop
            nxt.append((v, cur))
        walkers = nxt
        if len(found) >= req.stop_after:
            break
    return SearchResult(first is not None, first, messages, disturbed, len(found))


# ---------------------------------------------------------------- batches
class _Compiled:
    """Index-space view of a graph for vectorized search."""

    def __init__(self, g: Graph):
        self.labels = g.nodes
        self.pos = {u: i for i, u in enumerate(self.labels)}
        n = len(self.labels)
        self.active = np.ones(n, dtype=bool)
        for u in g.passive:
            if u in self.pos:
                self.active[self.pos[u]] = False
        rows, cols = [], []
        for u, nb in g.adj.items():
            for v in nb:
                if v not in g.passive:
                    rows.append(self.pos[u])
                    cols.append(self.pos[v])
        self.src = np.asarray(rows, dtype=np.int64)
        self.dst = np.asarray(cols, dtype=np.int64)
        order = np.lexsort((self.dst, self.src))
        self.src, self.dst = self.src[order], self.dst[order]
        # directed: u -> v exists iff v is active
        self.fwd = sparse.csr_matrix((np.ones(len(rows)), (self.src, self.dst)), shape=(n, n))
        self.fwd.sort_indices()
        self.indptr = self.fwd.indptr
        self.nbr = self.fwd.indices
        self.n = n

    def distances(self, sources: np.ndarray, limit: int, sink=None) -> np.ndarray:
        """Hop distance from each source (inf beyond ``limit`` or unreachable).

        Nodes flagged in ``sink`` receive messages but never forward them.
        """
        if len(sources) == 0:
            return np.zeros((0, self.n))
        m = self.fwd
        if sink is not None and sink.any():
            keep = ~sink[self.src]
            m = sparse.csr_matrix((np.ones(int(keep.sum())), (self.src[keep], self.dst[keep])),
                                  shape=(self.n, self.n))
        d = csgraph.dijkstra(m, directed=True, unweighted=True,
                             indices=sources, limit=limit + 0.5)
        return np.atleast_2d(d)

    def backtrack_free(self) -> sparse.csr_matrix:
        """Edge-to-edge successor matrix: (u->v) feeds (v->w) for w != u."""
        E = len(self.src)
        head_of = self.dst
        # edges leaving each node, as ranges into the sorted edge list
        starts = self.indptr
        rows, cols = [], []
        for e in range(E):
            v = head_of[e]
            lo, hi = starts[v], starts[v + 1]
            if hi > lo:
                nxt = np.arange(lo, hi)
                nxt = nxt[self.dst[nxt] != self.src[e]]
                rows.append(np.full(len(nxt), e))
                cols.append(nxt)
        if rows:
            r = np.concatenate(rows)
            c = np.concatenate(cols)
        else:
            r = c = np.zeros(0, dtype=np.int64)
        return sparse.csr_matrix((np.ones(len(r)), (r, c)), shape=(E, E))


def batch_search(g: Graph, catalog: FileCatalog, sources, files, ttls, algorithm: str,
                 rng: RngStream | None = None, walks: int = 4, no_backtrack: bool = True,
                 forward_on_hit: bool = False, chunk: int = 256) -> MetricsSample:
    """Evaluate a fixed workload of (source, file) queries at each ttl.

    ``sources`` are node labels, ``files`` are 1-based file ranks. Random
    walks consume ``rng``; flooding is deterministic. Floods are evaluated
    per file, since the nodes able to answer (which reply instead of
    forwarding unless ``forward_on_hit``) depend on the file.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    ttls = sorted(int(t) for t in ttls)
    if not ttls or ttls[0] < 0:
        raise ValueError("ttls must be non-negative and non-empty")
    if len(sources) != len(files) or len(sources) == 0:
        raise ValueError("need one file per source and at least one query")
    cg = _Compiled(g)
    srcs = np.array([cg.pos[int(s)] for s in sources], dtype=np.int64)
    files = np.asarray(files, dtype=np.int64)
    ans = answer_matrix(g, catalog, cg.labels)
    tmax = ttls[-1]
    if algorithm == "random_walk":
        if rng is None:
            raise ValueError("random walk needs an rng")
        return _batch_walk(cg, ans, srcs, files, ttls, rng, walks, no_backtrack)

    Q = len(srcs)
    self_hit = ans[files, srcs]
    hit = np.where(self_hit, 0.0, np.inf)
    msgs = {t: np.zeros(Q) for t in ttls}
    dist = {t: np.zeros(cg.n) for t in ttls}
    B = cg.backtrack_free().T.tocsr() if algorithm == "flood_repeated" else None
    no_sink = np.zeros(cg.n, dtype=bool)
    for f in np.unique(files[~self_hit]):
        qs = np.nonzero((files == f) & ~self_hit)[0]
        uniq, inv = np.unique(srcs[qs], return_inverse=True)
        w = np.bincount(inv, minlength=len(uniq)).astype(np.float64)
        reach = ans[f] & cg.active
        sink = no_sink if forward_on_hit else reach
        D = cg.distances(uniq, tmax, sink)
        if reach.any():
            hit[qs] = D[:, reach].min(axis=1)[inv]
        if B is None:
            for t in ttls:
                within = (D <= t) & (D > 0)
                msgs[t][qs] = within.sum(axis=1)[inv]
                dist[t] += w @ within
            continue
        go_on = (~sink[cg.dst]).astype(np.float64)[:, None]
        for lo in range(0, len(uniq), chunk):
            block = uniq[lo:lo + chunk]
            wb = w[lo:lo + chunk]
            x = np.zeros((len(cg.src), len(block)))
            for c, s in enumerate(block):
                x[cg.indptr[s]:cg.indptr[s + 1], c] = 1.0
            cum_m = np.zeros(len(block))
            cum_d = np.zeros(cg.n)
            sel = (inv >= lo) & (inv < lo + chunk)
            for hop in range(1, tmax + 1):
                cum_m = cum_m + x.sum(axis=0)
                cum_d = cum_d + np.bincount(cg.dst, weights=x @ wb, minlength=cg.n)
                if hop in msgs:
                    msgs[hop][qs[sel]] = cum_m[inv[sel] - lo]
                    dist[hop] += cum_d
                if hop < tmax:
                    x = B @ (x * go_on)
    sr, mm, mh, tm, db = {}, {}, {}, {}, {}
    for t in ttls:
        ok = hit <= t
        sr[t] = float(ok.mean())
        tm[t] = int(round(msgs[t].sum()))
        mm[t] = tm[t] / Q
        mh[t] = float(hit[ok].mean()) if ok.any() else None
        db[t] = {cg.labels[i]: int(round(v)) for i, v in enumerate(dist[t])}
    return MetricsSample(algorithm, ttls, Q, sr, mm, mh, tm, db)


def _batch_walk(cg: _Compiled, ans, srcs, files, ttls, rng, walks, no_backtrack) -> MetricsSample:
    Q = len(srcs)
    tmax = ttls[-1]
    W = Q * walks
    pos = np.repeat(srcs, walks)
    prev = np.full(W, -1, dtype=np.int64)
    qid = np.repeat(np.arange(Q), walks)
    deg_all = np.diff(cg.indptr)
    self_hit = ans[files, srcs]
    hit = np.where(self_hit, 0.0, np.inf)
    live = ~np.repeat(self_hit, walks)
    msgs_at = np.zeros((tmax + 1, Q))          # messages sent during hop h
    visits = []                                 # (hop, node indices, query ids) per step
    for hop in range(1, tmax + 1):
        idx = np.nonzero(live)[0]
        if len(idx) == 0:
            break
        cur = pos[idx]
        deg = deg_all[cur]
        can = deg > 0
        idx, cur, deg = idx[can], cur[can], deg[can]
        pv = prev[idx]
        u = rng.random(len(idx))
        nb_lo = cg.indptr[cur]
        # no-backtrack: draw among deg-1 slots and swap the previous node for the last slot;
        # the previous node counts only when it is itself an active neighbour
        back = (pv >= 0) & (deg > 1) if no_backtrack else np.zeros(len(idx), dtype=bool)
        back &= cg.active[np.maximum(pv, 0)]
        span = np.where(back, deg - 1, deg)
        r = np.minimum((u * span).astype(np.int64), span - 1)
        choice = cg.nbr[nb_lo + r]
        swap = back & (choice == pv)
        choice[swap] = cg.nbr[nb_lo[swap] + deg[swap] - 1]
        prev[idx] = cur
        pos[idx] = choice
        q = qid[idx]
        np.add.at(msgs_at[hop], q, 1)
        visits.append((hop, choice.copy(), q.copy()))
        got = ans[files[q], choice]
        newly = q[got & (hit[q] > hop)]
        hit[newly] = hop
        live &= ~(hit[qid] <= hop)
    cum = np.cumsum(msgs_at, axis=0)
    sr, mm, mh, tm, db = {}, {}, {}, {}, {}
    for t in ttls:
        ok = hit <= t
        sr[t] = float(ok.mean())
        tm[t] = int(cum[t].sum())
        mm[t] = tm[t] / Q
        mh[t] = float(hit[ok].mean()) if ok.any() else None
        d = np.zeros(cg.n)
        for hop, nodes, _ in visits:
            if hop <= t:
                d += np.bincount(nodes, minlength=cg.n)
        db[t] = {cg.labels[i]: int(v) for i, v in enumerate(d)}
    return MetricsSample("random_walk", ttls, Q, sr, mm, mh, tm, db)
