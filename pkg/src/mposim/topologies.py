"""Comparison topologies: power-law random graph, super-peer clusters, square-root adaptive graph."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from .graph import Graph
from .kernel import FileCatalog, RngStream, sample_query_files

# d_max per network size, shared d_min and initial degree
SQRT_DMAX = {500: 40, 1000: 80, 1500: 100, 2000: 160}
SQRT_DMIN = 3
SQRT_D0 = 4

# power-law exponent used when none is given; top-rank degree comes from omega
DEFAULT_RTPL_ALPHA = 0.5


def _seed_from(rng: RngStream) -> int:
    return int(rng.integers(0, 2**31 - 1))


def repair_connectivity(g: Graph, rng: RngStream, cap: int | None = None) -> int:
    """Join every component to the largest with one edge each; return edges added.

    Endpoints are drawn uniformly, but nodes already at ``cap`` are avoided
    when possible so the repair does not inflate the maximum degree.
    """
    comps = sorted(g.components(), key=lambda c: (-len(c), min(c)))
    if len(comps) <= 1:
        return 0
    main = list(comps[0])
    added = 0
    for comp in comps[1:]:
        inside = [u for u in comp if cap is None or g.degree(u) < cap] or list(comp)
        outside = [u for u in main if cap is None or g.degree(u) < cap] or main
        u = inside[int(rng.integers(len(inside)))]
        v = outside[int(rng.integers(len(outside)))]
        g.add_edge(u, v)
        main.extend(comp)
        added += 1
    return added


def rtpl_degree_sequence(N: int, omega: float, alpha_pl: float) -> np.ndarray:
    ranks = np.arange(1, N + 1, dtype=float)
    return np.maximum(1, np.rint(omega / ranks ** alpha_pl)).astype(np.int64)


def gen_rtpl(N: int, omega: float, alpha_pl: float = DEFAULT_RTPL_ALPHA,
             rng: RngStream | None = None) -> Graph:
    """Power-law random graph: the rank-i node targets max(1, round(omega / i**alpha)) links."""
    if N < 2:
        raise ValueError("N must be >= 2")
    if omega <= 0:
        raise ValueError("omega must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    seq = rtpl_degree_sequence(N, omega, alpha_pl)
    if seq[0] > N - 1:
        raise ValueError(f"infeasible degree sequence: top degree {seq[0]} > N-1")
    if seq.sum() % 2:
        seq[-1] += 1
    # rank order is randomized over node labels
    labels = rng.permutation(N)
    multi = nx.configuration_model([int(x) for x in seq], seed=_seed_from(rng))
    g = Graph.empty(N)
    rejected = 0
    for a, b in multi.edges():
        u, v = int(labels[a]), int(labels[b])
        if u == v or g.has_edge(u, v):
            rejected += 1
            continue
        g.add_edge(u, v)
    repaired = repair_connectivity(g, rng, cap=int(seq[0]))
    g.notes.update(kind="rtpl", omega=float(omega), alpha_pl=float(alpha_pl),
                   rejected_stubs=rejected, repair_edges=repaired)
    return g


def calibrate_rtpl_omega(target_max: int) -> float:
    """The rank-1 node's target degree is omega itself."""
    return float(target_max)


@dataclass
class SupernodeParams:
    c_size_range: tuple = (5, 15)
    backups: int = 2
    inter_degree: int = 10          # mean super-peer to super-peer links


def _cluster_sizes(N: int, lo: int, hi: int, rng: RngStream) -> list[int]:
    sizes = []
    left = N
    while left > 0:
        if left <= hi:
            if left >= lo or not sizes:
                sizes.append(left)
            else:
                # spread the short tail over earlier clusters that still have room
                for n in range(len(sizes)):
                    while left and sizes[n] < hi:
                        sizes[n] += 1
                        left -= 1
                if left:
                    sizes.append(left)
            break
        s = int(rng.integers(lo, hi + 1))
        if 0 < left - s < lo:
            s = left - lo if left - lo >= lo else s
        sizes.append(s)
        left -= s
    return sizes


def gen_supernode(N: int, c_size_range=(5, 15), rng: RngStream | None = None,
                  params: SupernodeParams | None = None) -> Graph:
    """Clusters of one super-peer, two backups and leaves; super-peers form a random mesh.

    Leaves and backups are passive for search: the super-peer answers for its
    whole cluster and backups only mirror it.
    """
    if N < 5:
        raise ValueError("N must be >= 5")
    rng = rng if rng is not None else np.random.default_rng(0)
    params = params or SupernodeParams(tuple(c_size_range))
    lo, hi = params.c_size_range
    sizes = _cluster_sizes(N, lo, hi, rng)
    perm = [int(x) for x in rng.permutation(N)]
    g = Graph.empty(N)
    supers = []
    pos = 0
    clusters = []
    for s in sizes:
        members = perm[pos:pos + s]
        pos += s
        sp, backups, leaves = members[0], members[1:1 + params.backups], members[1 + params.backups:]
        for b in backups:
            g.add_edge(sp, b)
        for x in range(len(backups)):
            for y in range(x + 1, len(backups)):
                g.add_edge(backups[x], backups[y])
        for leaf in leaves:
            g.add_edge(sp, leaf)
        g.covers[sp] = frozenset(members)
        g.passive.update(members[1:])
        supers.append(sp)
        clusters.append(members)
    n_sp = len(supers)
    if n_sp > 1:
        k = min(params.inter_degree, n_sp - 1)
        # each super-peer opens k/2 links to random others: mean inter-degree ~ k
        opens = max(1, k // 2)
        for u in supers:
            others = [v for v in supers if v != u and not g.has_edge(u, v)]
            want = min(opens, len(others))
            for idx in rng.choice(len(others), size=want, replace=False):
                g.add_edge(u, others[int(idx)])
    repaired = 0
    # the super-peer mesh must be connected for the overlay to be
    mesh = Graph.from_edges(supers, [(u, v) for u in supers for v in g.adj[u] if v in g.covers and u < v])
    comps = sorted(mesh.components(), key=lambda c: (-len(c), min(c)))
    for comp in comps[1:]:
        u = comp[int(rng.integers(len(comp)))]
        v = comps[0][int(rng.integers(len(comps[0])))]
        g.add_edge(u, v)
        repaired += 1
    g.notes.update(kind="supernode", clusters=len(sizes), cluster_sizes=sizes,
                   super_peers=sorted(supers), repair_edges=repaired)
    return g


@dataclass
class SquareRootParams:
    d_max: int = 40
    d_min: int = SQRT_DMIN
    d0: int = SQRT_D0
    batch: int = 100
    walks: int = 4
    warmup_ttl: int = 256

    def __post_init__(self):
        if not self.d_min <= self.d0 <= self.d_max:
            raise ValueError("need d_min <= d0 <= d_max")

    @classmethod
    def for_size(cls, N: int, **kw) -> "SquareRootParams":
        sizes = sorted(SQRT_DMAX)
        key = min(sizes, key=lambda s: (abs(s - N), s))
        return cls(d_max=SQRT_DMAX[key], **kw)


def ideal_sqrt_degree(q_match: float, q_total: float, params: SquareRootParams) -> int:
    """round(d_max * sqrt(Q_match / Q_total)) if that exceeds d_min, else d_min."""
    if q_total <= 0:
        return params.d0
    d = int(round(params.d_max * math.sqrt(q_match / q_total)))
    return d if d > params.d_min else params.d_min


def _random_regular_start(N: int, d0: int, rng: RngStream) -> Graph:
    d0 = min(d0, N - 1)
    if (N * d0) % 2:
        d0 -= 1
    h = nx.random_regular_graph(d0, N, seed=_seed_from(rng)) if d0 > 0 else nx.empty_graph(N)
    return Graph.from_edges(range(N), h.edges())


def gen_squareroot(N: int, params: SquareRootParams, warmup_queries: int,
                   catalog: FileCatalog, rng: RngStream) -> Graph:
    """Start from a d0-regular random graph and adapt degrees toward d_max * sqrt(g_k).

    Popularity g_k = Q_match / Q_total is measured from k-walker random-walk
    searches (first hit ends a query); every ``batch`` queries each peer
    re-computes its ideal degree and adds or drops random links.
    """
    if N < 2:
        raise ValueError("N must be >= 2")
    g = _random_regular_start(N, params.d0, rng)
    hosted = catalog.hosted_by()
    holds = np.zeros((catalog.m + 1, N), dtype=bool)
    for host, files in hosted.items():
        if 0 <= host < N:
            for f in files:
                holds[f, host] = True
    q_total = np.zeros(N, dtype=np.int64)
    q_match = np.zeros(N, dtype=np.int64)
    files = sample_query_files(catalog, rng, warmup_queries)
    sources = rng.integers(N, size=warmup_queries)
    trace = []
    for start in range(0, warmup_queries, params.batch):
        for n in range(start, min(start + params.batch, warmup_queries)):
            f, s = int(files[n]), int(sources[n])
            if holds[f, s]:
                continue
            walkers = [(s, -1)] * params.walks
            done = False
            for _ in range(params.warmup_ttl):
                nxt = []
                for cur, prev in walkers:
                    nb = sorted(g.adj[cur])
                    if len(nb) > 1 and prev in g.adj[cur]:
                        nb.remove(prev)
                    if not nb:
                        nxt.append((cur, prev))
                        continue
                    v = nb[int(rng.integers(len(nb)))]
                    q_total[v] += 1
                    if holds[f, v]:
                        q_match[v] += 1
                        done = True
                    nxt.append((v, cur))
                walkers = nxt
                if done:
                    break
        ideal = np.array([ideal_sqrt_degree(q_match[k], q_total[k], params) for k in range(N)])
        trace.append(_adapt_degrees(g, ideal, params, rng))
    repaired = repair_connectivity(g, rng, cap=params.d_max)
    ideal = np.array([ideal_sqrt_degree(q_match[k], q_total[k], params) for k in range(N)])
    g.notes.update(kind="squareroot", d_max=params.d_max, d_min=params.d_min, d0=params.d0,
                   warmup_queries=int(warmup_queries), repair_edges=repaired,
                   q_total=q_total.tolist(), q_match=q_match.tolist(), ideal=ideal.tolist(),
                   adapt_gap=trace)
    return g


def _adapt_degrees(g: Graph, ideal: np.ndarray, params: SquareRootParams, rng: RngStream) -> int:
    """One recomputation round; returns the total |degree - ideal| afterwards.

    Links are added only toward peers that also want more links, and dropped
    preferably toward peers that have too many, so both ends move toward
    their ideal.
    """
    N = len(ideal)
    for k in (int(x) for x in rng.permutation(N)):
        deg = g.degree(k)
        if deg < ideal[k]:
            want = int(ideal[k] - deg)
            pool = [v for v in range(N) if v != k and v not in g.adj[k]
                    and g.degree(v) < ideal[v] and g.degree(v) < params.d_max]
            take = min(want, len(pool))
            for idx in rng.choice(len(pool), size=take, replace=False) if take else ():
                g.add_edge(k, pool[int(idx)])
        elif deg > ideal[k]:
            extra = int(deg - ideal[k])
            nbrs = sorted(g.adj[k])
            over = [v for v in nbrs if g.degree(v) > ideal[v]]
            rest = [v for v in nbrs if v not in over and g.degree(v) > params.d_min]
            for pool in (over, rest):
                order = [pool[int(i)] for i in rng.permutation(len(pool))]
                for v in order:
                    if extra == 0:
                        break
                    if g.degree(v) > params.d_min:
                        g.remove_edge(k, v)
                        extra -= 1
    return int(sum(abs(g.degree(k) - ideal[k]) for k in range(N)))
