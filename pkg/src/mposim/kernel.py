"""Deterministic simulation foundation.

Seeded random streams, ON-relative 2D placement, the Zipf file/query
workload and churn scenarios. Everything downstream draws randomness from
streams created here, so a (config, seed) pair fully determines a run.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

RngStream = np.random.Generator

# Requirement universe size used for per-file query vectors.
DEFAULT_UNIVERSE = 16


def make_rng(seed: int, stream: str | None = None) -> RngStream:
    """Return a PCG64 generator for ``seed``.

    ``stream`` names a subsystem ("topology", "workload", "churn", ...); each
    name gets its own child sequence so that experiment axes stay decoupled.
    """
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    if stream is None:
        return np.random.Generator(np.random.PCG64(seed))
    key = zlib.crc32(stream.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, key])))


@dataclass(frozen=True)
class Coordinate:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite coordinate ({self.x}, {self.y})")


ORIGIN = Coordinate(0.0, 0.0)


def place_nodes(n: int, rng: RngStream, spread: float = 1000.0) -> list[Coordinate]:
    """Uniform placement in the square [-spread, spread]^2 around the origin node."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if spread <= 0:
        raise ValueError("spread must be positive")
    xy = rng.uniform(-spread, spread, size=(n, 2))
    return [Coordinate(float(x), float(y)) for x, y in xy]


def distance(a: Coordinate, b: Coordinate) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def region_label(c: Coordinate, spread: float, cells: int = 2) -> int:
    """Categorical stand-in for an IP prefix: index of the grid cell holding ``c``."""
    step = 2.0 * spread / cells
    ix = min(cells - 1, max(0, int((c.x + spread) // step)))
    iy = min(cells - 1, max(0, int((c.y + spread) // step)))
    return iy * cells + ix


def zipf_weights(m: int, alpha: float) -> np.ndarray:
    ranks = np.arange(1, m + 1, dtype=float)
    w = ranks ** -alpha
    return w / w.sum()


def allocate_replicas(q: np.ndarray, R: int) -> np.ndarray:
    """Integer replica counts r_i ~ R*q_i, each >= 1, summing to R, non-increasing."""
    m = len(q)
    if R < m:
        raise ValueError(f"R={R} < m={m}: every file needs at least one replica")
    ideal = R * q
    r = np.maximum(1, np.floor(ideal)).astype(np.int64)
    deficit = R - int(r.sum())
    if deficit > 0:
        # largest remainder first; stable sort keeps lower ranks ahead on ties
        order = np.argsort(-(ideal - np.floor(ideal)), kind="stable")
        r[order[:deficit]] += 1
    elif deficit < 0:
        # the floor of 1 over-allocated: trim from the tail among counts > 1
        for i in range(m - 1, -1, -1):
            if deficit == 0:
                break
            take = min(r[i] - 1, -deficit)
            r[i] -= take
            deficit += take
    return np.sort(r)[::-1].copy()


@dataclass
class FileCatalog:
    """Zipf-popular files, their replica counts and where each copy lives.

    Ranks are 1-based as in the usual Zipf notation; arrays are indexed by
    ``rank - 1``.
    """

    m: int
    alpha: float
    query_weights: np.ndarray
    replica_counts: np.ndarray
    placement: dict[int, list[int]]
    vectors: np.ndarray = field(repr=False)

    @property
    def total_replicas(self) -> int:
        return int(self.replica_counts.sum())

    def hosted_by(self) -> dict[int, set[int]]:
        """Invert the placement: host -> set of file ranks."""
        out: dict[int, set[int]] = {}
        for rank, hosts in self.placement.items():
            for h in hosts:
                out.setdefault(h, set()).add(rank)
        return out

    def without_hosts(self, gone: set[int]) -> "FileCatalog":
        """Catalog view after ``gone`` hosts left; lost copies are not re-created."""
        placement = {f: [h for h in hs if h not in gone] for f, hs in self.placement.items()}
        counts = np.array([len(placement[f]) for f in range(1, self.m + 1)], dtype=np.int64)
        return FileCatalog(self.m, self.alpha, self.query_weights, counts, placement, self.vectors)


def random_query_vectors(m: int, rng: RngStream, universe: int = DEFAULT_UNIVERSE,
                         max_bits: int = 4) -> np.ndarray:
    vec = np.zeros((m, universe), dtype=np.uint8)
    for i in range(m):
        k = int(rng.integers(1, max_bits + 1))
        vec[i, rng.choice(universe, size=k, replace=False)] = 1
    return vec


def build_catalog(m: int, alpha: float, R: int, hosts: Sequence[int],
                  rng: RngStream, universe: int = DEFAULT_UNIVERSE) -> FileCatalog:
    if m < 1:
        raise ValueError("m must be >= 1")
    if not hosts:
        raise ValueError("hosts must be non-empty")
    q = zipf_weights(m, alpha)
    r = allocate_replicas(q, R)
    hosts = list(hosts)
    placement: dict[int, list[int]] = {}
    for i in range(m):
        k = int(r[i])
        if k <= len(hosts):
            picks = rng.choice(len(hosts), size=k, replace=False)
        else:
            # more copies than hosts: every host gets one, the rest at random
            extra = rng.choice(len(hosts), size=k - len(hosts), replace=True)
            picks = np.concatenate([np.arange(len(hosts)), extra])
        placement[i + 1] = [hosts[int(j)] for j in picks]
    vectors = random_query_vectors(m, rng, universe)
    return FileCatalog(m, alpha, q, r, placement, vectors)


def sample_query_file(catalog: FileCatalog, rng: RngStream) -> int:
    return int(rng.choice(catalog.m, p=catalog.query_weights)) + 1


def sample_query_files(catalog: FileCatalog, rng: RngStream, n: int) -> np.ndarray:
    return rng.choice(catalog.m, size=n, p=catalog.query_weights) + 1


@dataclass
class ChurnScenario:
    leave_fraction: float
    leave_order: list[int]
    mode: str


def make_churn(nodes: Sequence[int], fraction: float, mode: str, rng: RngStream) -> ChurnScenario:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    if mode not in ("graceful", "crash"):
        raise ValueError(f"unknown churn mode {mode!r}")
    nodes = list(nodes)
    k = int(round(fraction * len(nodes)))
    perm = rng.permutation(len(nodes))[:k]
    return ChurnScenario(fraction, [nodes[int(i)] for i in perm], mode)
