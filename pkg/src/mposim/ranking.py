"""Source ranking: query similarity, pairwise evaluation, AS-level rank, free riders."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_ALPHA_SIM = 2.0
DEFAULT_LOAD_FACTOR = 0.1


class RequirementUniverse:
    """Ordered set of requirement labels; fixes the axes of query vectors."""

    def __init__(self, labels: Iterable[Hashable]):
        self.labels = tuple(labels)
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("requirement labels must be unique")
        self._pos = {lab: i for i, lab in enumerate(self.labels)}

    def __len__(self):
        return len(self.labels)

    def vector(self, requirements: Iterable[Hashable]) -> np.ndarray:
        v = np.zeros(len(self.labels), dtype=np.uint8)
        for r in requirements:
            v[self._pos[r]] = 1
        return v


def query_similarity(q, q2) -> float:
    """Cosine of the angle between two non-negative query vectors."""
    a = np.asarray(q, dtype=float)
    b = np.asarray(q2, dtype=float)
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("query similarity is undefined for a zero vector")
    s = float(a @ b) / (na * nb)
    return min(1.0, max(0.0, s))


@dataclass
class PairRecord:
    similarities: list[float] = field(default_factory=list)
    n_exchanges: int = 0
    exchange_time: float = 0.0
    # running sum of similarity**alpha for the alpha it was built with
    _powsum: float = 0.0
    _alpha: float | None = None


class ExchangeHistory:
    """Per ordered pair (evaluator, evaluated) exchange counters.

    Keys are arbitrary hashable peer identities; the overlay uses stable peer
    keys so that history survives a change of node ID.
    """

    def __init__(self, alpha_sim: float = DEFAULT_ALPHA_SIM):
        self.alpha_sim = alpha_sim
        self._pairs: dict[tuple, PairRecord] = {}
        self._by_target: dict[Hashable, set[Hashable]] = defaultdict(set)

    def pair(self, i, j) -> PairRecord | None:
        return self._pairs.get((i, j))

    def evaluators_of(self, j) -> set:
        return self._by_target.get(j, set())

    def __len__(self):
        return len(self._pairs)

    def record(self, i, j, qsim: float, duration: float) -> PairRecord:
        if not 0.0 <= qsim <= 1.0:
            raise ValueError(f"qsim must lie in [0, 1], got {qsim}")
        if duration <= 0:
            raise ValueError("exchange duration must be positive")
        rec = self._pairs.get((i, j))
        if rec is None:
            rec = self._pairs[(i, j)] = PairRecord(_alpha=self.alpha_sim)
            self._by_target[j].add(i)
        rec.similarities.append(qsim)
        rec.n_exchanges += 1
        rec.exchange_time += duration
        rec._powsum += qsim ** rec._alpha
        return rec

    def forget(self, node) -> None:
        """Drop every pair touching ``node`` (used only by tests and resets)."""
        for key in [k for k in self._pairs if node in k]:
            del self._pairs[key]
            self._by_target[key[1]].discard(key[0])


def record_exchange(history: ExchangeHistory, src, dst, qsim: float, duration: float) -> ExchangeHistory:
    history.record(src, dst, qsim, duration)
    return history


def evaluate_peer(history: ExchangeHistory, pair: tuple, alpha_sim: float | None = None) -> float:
    """E(P_i, P_j): sum over answered queries of Qsim**alpha, times N/T.

    An unseen pair evaluates to 0.
    """
    rec = history.pair(*pair)
    if rec is None or not rec.similarities:
        return 0.0
    alpha = history.alpha_sim if alpha_sim is None else alpha_sim
    if alpha == rec._alpha:
        powsum = rec._powsum
    else:
        powsum = math.fsum(s ** alpha for s in rec.similarities)
    return powsum * rec.n_exchanges / rec.exchange_time


def inverse_distance_weight(dist: float) -> float:
    return 1.0 / (1.0 + dist)


def source_rank(target, members: Sequence, history: ExchangeHistory,
                dist: Callable[[object, object], float],
                weight: Callable[[float], float] = inverse_distance_weight,
                alpha_sim: float | None = None) -> float:
    """Distance-weighted mean of the evaluations ``target`` got from its AS peers.

    ``dist(a, b)`` gives the coordinate distance between two members.
    """
    num = 0.0
    den = 0.0
    for i in members:
        if i == target:
            continue
        w = weight(dist(i, target))
        num += evaluate_peer(history, (i, target), alpha_sim) * w
        den += w
    return num / den if den > 0 else 0.0


def min_ef(srs: Iterable[float], load_factor: float = DEFAULT_LOAD_FACTOR) -> float:
    """Free-rider threshold of an AS: ``load_factor`` times the members' mean SR."""
    vals = list(srs)
    if not vals:
        return 0.0
    return load_factor * (math.fsum(vals) / len(vals))


def is_free_rider(node, sr_of: Mapping, load_factor: float = DEFAULT_LOAD_FACTOR) -> bool:
    """True iff ``node``'s SR lies strictly below its AS threshold.

    ``sr_of`` maps every member of the AS to its SR.
    """
    if node not in sr_of:
        raise KeyError(f"{node!r} is not a member of this AS")
    return sr_of[node] < min_ef(sr_of.values(), load_factor)
