"""The MPO overlay: autonomous systems in levels and layers, run by three ICs each.

Lattice layout
--------------
Every AS occupies a *slot*; slots are filled strictly in order, so the live
ASs always form a prefix of the slot sequence. Slot ``s`` maps to a lattice
position ``(layer i, level j, index k)``. Positions are grouped in cells
``(i, j)`` visited layer by layer, level by level within a layer
(``levels_per_layer`` levels each). Cell ``(i, j)`` holds
``root_width * d**(i + j)`` ASs, so the root cell holds ``root_width`` ASs
(``d`` by default) and each further level or layer multiplies by ``d``.

Links derived from positions (the "upper" side is the one nearer the root):

* level links: ``(i, j, k)`` -> upper ``(i, j-1, k // d)``; level-0 ASs
  chain to ``(i, 0, k-1)`` instead. Carried by IC_level.
* layer links: ``(i, j, k)`` -> upper ``(i-1, j, k // d)``. Carried by IC_layer.

An AS therefore has at most ``d`` lower-level neighbours (``d + 1`` on level
0, the chain successor being the extra one), at most ``d`` lower-layer
neighbours and at most one upper neighbour of each kind; no node degree can
exceed ``d + 4``. Because a new level or layer only opens once every earlier
cell is full, the number of levels per layer and the number of layers both
stay below ``log_d(M) + 1``.

When an AS empties its slot is refilled by relocating the last AS, which
keeps the prefix property; relocated members receive fresh node IDs.
"""
from __future__ import annotations

import copy
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .graph import Graph
from .kernel import ORIGIN, Coordinate, RngStream, distance, region_label
from .ranking import (DEFAULT_ALPHA_SIM, DEFAULT_LOAD_FACTOR, ExchangeHistory,
                      min_ef, query_similarity, source_rank)

ROLES = ("level", "local", "layer")   # election priority order
NN = "nn"
STATUSES = ("free", "busy", "normal")
_FIELD_BITS = 32
_FIELD_MAX = (1 << _FIELD_BITS) - 1


class OverlayError(Exception):
    pass


class NodeId(NamedTuple):
    layer: int
    level: int
    as_index: int
    node_index: int

    @property
    def packed(self) -> int:
        return encode_id(*self)


def encode_id(layer: int, level: int, as_index: int, node_index: int) -> int:
    """Pack the four fields into one 128-bit integer, layer in the top 32 bits."""
    out = 0
    for f in (layer, level, as_index, node_index):
        if not 0 <= f <= _FIELD_MAX:
            raise OverflowError(f"node-id field {f} does not fit in 32 bits")
        out = (out << _FIELD_BITS) | f
    return out


def decode_id(packed: int) -> NodeId:
    if not 0 <= packed < 1 << 128:
        raise OverflowError("packed node id out of 128-bit range")
    parts = []
    for _ in range(4):
        parts.append(packed & _FIELD_MAX)
        packed >>= _FIELD_BITS
    return NodeId(*reversed(parts))


@dataclass
class MPOParams:
    d: int = 2
    root_width: int | None = None          # ASs on the first level; defaults to d
    levels_per_layer: int = 4
    p_cri: dict = field(default_factory=lambda: {"local": 1.0, "level": 1.0, "layer": 1.0})
    load_factor: float = DEFAULT_LOAD_FACTOR
    alpha_sim: float = DEFAULT_ALPHA_SIM
    min_as_size: int = 3
    spread: float = 1000.0
    cp_cells: int = 2

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if self.root_width is None:
            self.root_width = self.d
        if self.root_width < self.d:
            raise ValueError("root_width must be >= d or the height bound cannot hold")
        if self.levels_per_layer < 1:
            raise ValueError("levels_per_layer must be >= 1")
        if not 1 <= self.min_as_size <= self.d + 3:
            raise ValueError("min_as_size must lie in [1, d+3]")

    @property
    def max_as_size(self) -> int:
        return self.d + 3


@dataclass
class Peer:
    key: int                                  # stable identity (stands in for an IP)
    coord: Coordinate
    cp: int = 0                               # common-prefix group label
    tolerance: float = math.inf               # R_x
    files: frozenset = frozenset()
    status: str = "normal"
    sr: float = 0.0
    sr_updated: float = 0.0
    cooperative: bool = True
    node_id: NodeId | None = None
    as_uid: int | None = None


@dataclass
class Backup:
    kind: str                                 # "level" (files + SR) or "layer" (SR only)
    entries: dict                             # key -> (files or None, sr)


@dataclass
class AutonomousSystem:
    uid: int
    slot: int
    cp: int
    members: list = field(default_factory=list)
    ics: dict = field(default_factory=lambda: {r: None for r in ROLES})
    next_t: int = 0
    index: dict = field(default_factory=dict)      # key -> files, held by the ICs
    offline: set = field(default_factory=set)      # NNs marked offline in IC_local
    backups: dict = field(default_factory=dict)    # subject uid -> Backup
    links: dict = field(default_factory=dict)      # neighbour uid -> its IC key as last heard
    upper_addresses: list = field(default_factory=list)
    departing: deque = field(default_factory=deque)

    def role_of(self, key) -> str:
        for r in ROLES:
            if self.ics[r] == key:
                return r
        return NN

    def nns(self) -> list:
        ic = set(self.ics.values())
        return [k for k in self.members if k not in ic]

    def __len__(self):
        return len(self.members)


@dataclass
class RetiredRecord:
    node_id: NodeId
    cp: int
    sr: float
    as_uid: int
    reason: str


@dataclass
class JoinOutcome:
    status: str                 # accepted | redirected | dropped_existing | rejected_whitewasher
    as_uid: int | None = None
    node_id: NodeId | None = None
    dropped: int | None = None  # free rider removed to make room
    displaced: int | None = None  # farthest member moved to its next-nearest AS
    seeded: bool = False


@dataclass
class LeaveOutcome:
    key: int
    role: str
    substitute: int | None = None
    recipients: list = field(default_factory=list)


@dataclass
class RecoveryReport:
    actions: list = field(default_factory=list)   # dicts, one per affected AS
    defunct: list = field(default_factory=list)   # uids whose every member crashed


@dataclass
class StructureReport:
    max_degree: int
    as_count: int
    levels_per_layer: dict
    layers: int
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def threshold_distance(ics_a: dict, ics_b: dict, p_cri: dict) -> float:
    """Weighted mean distance between same-role ICs of two ASs.

    ``ics_a``/``ics_b`` map role -> Coordinate (or None when vacant). Roles
    vacant on either side, or with zero weight, drop out of both sums.
    """
    num = den = 0.0
    for role in ROLES:
        a, b = ics_a.get(role), ics_b.get(role)
        w = float(p_cri.get(role, 0.0))
        if a is None or b is None or w <= 0:
            continue
        num += w * distance(a, b)
        den += w
    if den == 0:
        raise OverlayError("threshold distance undefined: no IC role present in both ASs")
    return num / den


class Overlay:
    """Mutable MPO state for one trial. All operations are serialized."""

    def __init__(self, params: MPOParams | None = None):
        self.params = params or MPOParams()
        self.peers: dict[int, Peer] = {}
        self.ases: dict[int, AutonomousSystem] = {}
        self.slots: list[int] = []
        self.retired: dict[int, RetiredRecord] = {}
        self.history = ExchangeHistory(self.params.alpha_sim)
        self.clock = 0.0
        self.defunct_log: list[dict] = []
        self.origin_active = True
        self._next_uid = 0
        self._cells: list[tuple[int, int, int, int]] = []   # (layer, level, offset, size)
        self._geo_cache: dict[int, tuple] = {}
        self._pos_cache: dict[int, tuple] = {}

    # ------------------------------------------------------------------ lattice
    def _ensure_cells(self, upto_slot: int | None = None, upto_cell: int | None = None):
        p = self.params
        while True:
            if self._cells:
                i, j, off, size = self._cells[-1]
                end = off + size
            else:
                end = 0
            if upto_slot is not None and end > upto_slot:
                return
            if upto_cell is not None and len(self._cells) > upto_cell:
                return
            n = len(self._cells)
            i, j = divmod(n, p.levels_per_layer)
            self._cells.append((i, j, end, p.root_width * p.d ** (i + j)))

    def position(self, slot: int) -> tuple[int, int, int]:
        pos = self._pos_cache.get(slot)
        if pos is None:
            pos = self._pos_cache[slot] = self._locate(slot)
        return pos

    def _locate(self, slot: int) -> tuple[int, int, int]:
        self._ensure_cells(upto_slot=slot)
        lo, hi = 0, len(self._cells) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self._cells[mid][2] <= slot:
                lo = mid
            else:
                hi = mid - 1
        i, j, off, _ = self._cells[lo]
        return i, j, slot - off

    def _cell_slot(self, i: int, j: int, k: int) -> int | None:
        """Slot index of a lattice position, whether or not it is occupied."""
        if i < 0 or j < 0 or k < 0 or j >= self.params.levels_per_layer:
            return None
        c = i * self.params.levels_per_layer + j
        self._ensure_cells(upto_cell=c)
        _, _, off, size = self._cells[c]
        return off + k if k < size else None

    def slot_at(self, i: int, j: int, k: int) -> int | None:
        s = self._cell_slot(i, j, k)
        return s if s is not None and s < len(self.slots) else None

    def _geometry(self, slot: int) -> tuple:
        """(upper level, lower levels, upper layer, lower layers) as slot numbers."""
        geo = self._geo_cache.get(slot)
        if geo is None:
            i, j, k = self.position(slot)
            d = self.params.d
            up = self._cell_slot(i, j - 1, k // d) if j > 0 else (self._cell_slot(i, 0, k - 1) if k > 0 else None)
            low = [self._cell_slot(i, j + 1, k * d + c) for c in range(d)]
            if j == 0:
                low.append(self._cell_slot(i, 0, k + 1))
            upl = self._cell_slot(i - 1, j, k // d) if i > 0 else None
            lowl = [self._cell_slot(i + 1, j, k * d + c) for c in range(d)]
            geo = (up, tuple(s for s in low if s is not None), upl,
                   tuple(s for s in lowl if s is not None))
            self._geo_cache[slot] = geo
        return geo

    def _as_at(self, slot):
        if slot is None or slot >= len(self.slots):
            return None
        return self.ases[self.slots[slot]]

    def _present(self, slots) -> list:
        n = len(self.slots)
        return [self.ases[self.slots[s]] for s in slots if s < n]

    def upper_level(self, a: AutonomousSystem):
        return self._as_at(self._geometry(a.slot)[0])

    def lower_levels(self, a: AutonomousSystem) -> list:
        return self._present(self._geometry(a.slot)[1])

    def upper_layer(self, a: AutonomousSystem):
        return self._as_at(self._geometry(a.slot)[2])

    def lower_layers(self, a: AutonomousSystem) -> list:
        return self._present(self._geometry(a.slot)[3])

    def level_neighbors(self, a) -> list:
        up = self.upper_level(a)
        return ([up] if up is not None else []) + self.lower_levels(a)

    def layer_neighbors(self, a) -> list:
        up = self.upper_layer(a)
        return ([up] if up is not None else []) + self.lower_layers(a)

    def as_of(self, key: int) -> AutonomousSystem:
        return self.ases[self.peers[key].as_uid]

    def ordered_ases(self) -> list[AutonomousSystem]:
        return [self.ases[u] for u in self.slots]

    # ---------------------------------------------------------------- helpers
    def _dist(self, a: int, b: int) -> float:
        return distance(self.peers[a].coord, self.peers[b].coord)

    def ic_coords(self, a: AutonomousSystem) -> dict:
        return {r: (self.peers[k].coord if k is not None else None) for r, k in a.ics.items()}

    def d_avg(self, coord: Coordinate, a: AutonomousSystem) -> float:
        ics = [k for k in a.ics.values() if k is not None]
        if not ics:
            return math.inf
        return sum(distance(coord, self.peers[k].coord) for k in ics) / len(ics)

    def t_dist(self, a: AutonomousSystem, b: AutonomousSystem) -> float:
        return threshold_distance(self.ic_coords(a), self.ic_coords(b), self.params.p_cri)

    def _sr_key(self, key):
        return (-self.peers[key].sr, self.peers[key].node_id.packed)

    def _new_as(self, cp: int) -> AutonomousSystem:
        a = AutonomousSystem(uid=self._next_uid, slot=len(self.slots), cp=cp)
        self._next_uid += 1
        self.ases[a.uid] = a
        self.slots.append(a.uid)
        return a

    def _assign_id(self, a: AutonomousSystem, key: int, t: int | None = None):
        i, j, k = self.position(a.slot)
        if t is None:
            t = a.next_t
            a.next_t += 1
        self.peers[key].node_id = NodeId(i, j, k, t)
        self.peers[key].as_uid = a.uid

    def _add_member(self, a: AutonomousSystem, key: int):
        a.members.append(key)
        self._assign_id(a, key)
        a.index[key] = self.peers[key].files
        a.offline.discard(key)
        self._fill_vacancies(a)

    def _fill_vacancies(self, a: AutonomousSystem) -> list:
        """Give vacant roles, in priority order, to the best remaining NNs."""
        filled = []
        for role in ROLES:
            if a.ics[role] is None:
                nns = sorted(a.nns(), key=self._sr_key)
                if not nns:
                    break
                a.ics[role] = nns[0]
                filled.append(role)
        return filled

    # ------------------------------------------------------------- elections
    def elect_ics(self, a: AutonomousSystem) -> tuple:
        """Highest SR -> IC_level, then IC_local, then IC_layer; ties by smaller node id."""
        if not a.members:
            raise OverlayError("cannot elect ICs in an empty AS")
        ranked = sorted(a.members, key=self._sr_key)
        for n, role in enumerate(ROLES):
            a.ics[role] = ranked[n] if n < len(ranked) else None
        self._broadcast_all(a)
        return a.ics["level"], a.ics["local"], a.ics["layer"]

    def elect_all(self):
        for a in self.ordered_ases():
            self.elect_ics(a)
        self._sync_all()

    # -------------------------------------------------------------- backups
    def _sync(self, a: AutonomousSystem):
        """Refresh what a's neighbours hold about a, and a's own index."""
        a.index = {k: self.peers[k].files for k in a.members}
        entries_full = {k: (self.peers[k].files, self.peers[k].sr) for k in a.members}
        up = self.upper_level(a)
        if up is not None:
            up.backups[a.uid] = Backup("level", dict(entries_full))
        upl = self.upper_layer(a)
        if upl is not None:
            upl.backups[a.uid] = Backup("layer", {k: (None, v[1]) for k, v in entries_full.items()})
        nn_keys = a.nns()
        for low in self.lower_levels(a):
            low.upper_addresses = list(nn_keys)
        # prune backups about ASs that are no longer below a
        below = {b.uid for b in self.lower_levels(a)} | {b.uid for b in self.lower_layers(a)}
        for uid in [u for u in a.backups if u not in below]:
            del a.backups[uid]

    def _broadcast_all(self, a: AutonomousSystem) -> list:
        """Announce a's current ICs to every neighbour (used on (re)connection)."""
        recipients = []
        for b in self.level_neighbors(a):
            b.links[a.uid] = a.ics["level"]
            recipients.append((b.uid, "level"))
        for b in self.layer_neighbors(a):
            b.links[a.uid] = a.ics["layer"]
            recipients.append((b.uid, "layer"))
        # a hears from its neighbours as well
        for b in self.level_neighbors(a):
            a.links[b.uid] = b.ics["level"]
        for b in self.layer_neighbors(a):
            a.links[b.uid] = b.ics["layer"]
        current = {b.uid for b in self.level_neighbors(a)} | {b.uid for b in self.layer_neighbors(a)}
        for uid in [u for u in a.links if u not in current]:
            del a.links[uid]
        return recipients

    def _broadcast_role(self, a: AutonomousSystem, role: str) -> list:
        """Substitute announcement for one role, following the per-role recipient lists."""
        out = []
        local_ics = [(a.uid, r) for r in ROLES if r != role and a.ics[r] is not None]
        out += local_ics
        if role == "level":
            for b in self.level_neighbors(a):
                b.links[a.uid] = a.ics["level"]
                out.append((b.uid, "level"))
        elif role == "layer":
            for b in self.layer_neighbors(a):
                b.links[a.uid] = a.ics["layer"]
                out.append((b.uid, "layer"))
        else:
            out += [(a.uid, ("nn", k)) for k in a.nns()]
        return out

    def _refresh(self, ases: Iterable[AutonomousSystem]):
        seen = set()
        for a in ases:
            if a is None or a.uid in seen or a.uid not in self.ases:
                continue
            seen.add(a.uid)
            self._sync(a)
            self._broadcast_all(a)
            for b in self.level_neighbors(a) + self.layer_neighbors(a):
                if b.uid not in seen:
                    self._sync(b)

    def _sync_all(self):
        for a in self.ordered_ases():
            self._sync(a)
            self._broadcast_all(a)

    # ------------------------------------------------------------ bootstrap
    def _place_bootstrap(self, peers: Sequence[Peer]):
        by_cp: dict[int, list[Peer]] = {}
        for p in peers:
            by_cp.setdefault(p.cp, []).append(p)
        chunks: list[list[Peer]] = []
        size = self.params.max_as_size
        small = min(3, size)
        for cp, group in by_cp.items():
            group.sort(key=lambda p: (distance(p.coord, ORIGIN), p.key))
            parts = [group[x:x + size] for x in range(0, len(group), size)]
            # avoid a tail AS too small to hold a full Tri-IC
            if len(parts) > 1 and len(parts[-1]) < small:
                need = small - len(parts[-1])
                parts[-1] = parts[-2][-need:] + parts[-1]
                parts[-2] = parts[-2][:-need]
            chunks += parts
        chunks.sort(key=lambda c: (distance(c[0].coord, ORIGIN), c[0].key))
        for chunk in chunks:
            a = self._new_as(chunk[0].cp)
            for p in chunk:
                self.peers[p.key] = p
                self._add_member(a, p.key)

    # ---------------------------------------------------------------- SR
    def update_sr(self, key: int):
        a = self.as_of(key)
        p = self.peers[key]
        p.sr = source_rank(key, a.members, self.history, self._dist)
        p.sr_updated = self.clock

    def exchange(self, src: int, dst: int, qsim: float, duration: float = 1.0):
        """Record a completed exchange (src queried dst) and re-rank dst."""
        self.clock += duration
        self.history.record(src, dst, qsim, duration)
        if dst in self.peers:
            self.update_sr(dst)

    def min_ef(self, a: AutonomousSystem) -> float:
        return min_ef((self.peers[k].sr for k in a.members), self.params.load_factor)

    def is_free_rider(self, key: int, a: AutonomousSystem | None = None) -> bool:
        a = a or self.as_of(key)
        if key not in a.members:
            raise OverlayError(f"peer {key} is not a member of AS {a.uid}")
        return self.peers[key].sr < self.min_ef(a)

    # ---------------------------------------------------------------- join
    def _candidates(self, p: Peer) -> list[AutonomousSystem]:
        out = []
        for a in self.ordered_ases():
            if a.cp != p.cp:
                continue
            if any(distance(p.coord, self.peers[k].coord) < p.tolerance for k in a.members):
                out.append(a)
        return out

    def _nearest_with_room(self, coord, exclude=(), cp=None):
        best = None
        for a in self.ordered_ases():
            if a.uid in exclude or len(a) >= self.params.max_as_size or not a.members:
                continue
            score = (0 if cp is None or a.cp == cp else 1, self.d_avg(coord, a), a.slot)
            if best is None or score < best[0]:
                best = (score, a)
        return None if best is None else best[1]

    def join(self, p: Peer, target: int | None = None) -> JoinOutcome:
        """Admit a newcomer following the joining procedure.

        ``target`` optionally names the AS the newcomer asks to enter (for
        example via a remembered record); it is still subject to the
        whitewasher check against the newcomer's nearest AS.
        """
        if p.key in self.peers:
            raise OverlayError(f"peer {p.key} is already live")
        rec = self.retired.get(p.key)
        if rec is not None:
            p.sr = rec.sr
        if not self.slots:
            a = self._new_as(p.cp)
            self.peers[p.key] = p
            self._add_member(a, p.key)
            self._refresh([a])
            return JoinOutcome("accepted", a.uid, p.node_id, seeded=True)

        S = self._candidates(p)
        pool = S if S else [a for a in self.ordered_ases() if a.members]
        ranked = sorted(pool, key=lambda a: (self.d_avg(p.coord, a), a.slot))
        nearest = ranked[0]

        if target is not None:
            order = [self.ases[target]]
        elif S:
            order = sorted(S, key=lambda a: (self.d_avg(p.coord, a), a.slot))
        else:
            order = []

        for n, a in enumerate(order):
            plan = self._admission_plan(p, a)
            if plan is None:
                continue
            if a is not nearest:
                slack = self.d_avg(p.coord, nearest) + self.t_dist(a, nearest)
                if self.d_avg(p.coord, a) > slack:
                    return JoinOutcome("rejected_whitewasher", a.uid)
            return self._admit(p, a, plan, redirected=n > 0 or (target is not None and a is not nearest))

        if target is not None:
            # the asked-for AS had no way to take the newcomer: treat as a normal join
            return self.join(p)
        # nothing could take the newcomer: open the next AS slot
        a = self._new_as(p.cp)
        self.peers[p.key] = p
        self._add_member(a, p.key)
        self._refresh([a])
        return JoinOutcome("accepted", a.uid, p.node_id, seeded=True)

    def _admission_plan(self, p: Peer, a: AutonomousSystem):
        if len(a) + 1 <= self.params.max_as_size:
            return ("room", None)
        riders = [k for k in a.nns() if self.is_free_rider(k, a)]
        if riders:
            return ("drop", min(riders, key=lambda k: (self.peers[k].sr, self.peers[k].node_id.packed)))
        mine = self.d_avg(p.coord, a)
        far = max(a.nns(), key=lambda k: (self.d_avg(self.peers[k].coord, a),
                                          -self.peers[k].node_id.packed), default=None)
        if far is not None and self.d_avg(self.peers[far].coord, a) > mine:
            return ("displace", far)
        return None

    def _admit(self, p: Peer, a: AutonomousSystem, plan, redirected: bool) -> JoinOutcome:
        kind, victim = plan
        touched = [a]
        out = JoinOutcome("redirected" if redirected else "accepted", a.uid)
        if kind == "drop":
            self._remove_member(a, victim, reason="free-rider")
            out.status = "dropped_existing"
            out.dropped = victim
        elif kind == "displace":
            vp = self.peers[victim]
            self._remove_member(a, victim, reason=None)
            dest = self._nearest_with_room(vp.coord, exclude={a.uid}, cp=vp.cp)
            if dest is None:
                dest = self._new_as(vp.cp)
            self.peers[victim] = vp
            self._add_member(dest, victim)
            touched.append(dest)
            out.displaced = victim
        self.peers[p.key] = p
        self._add_member(a, p.key)
        self.retired.pop(p.key, None)
        out.node_id = p.node_id
        self._refresh(touched)
        return out

    # ---------------------------------------------------------------- removal
    def _remove_member(self, a: AutonomousSystem, key: int, reason: str | None):
        """Take key out of a (no substitution); archive it unless it is moving."""
        p = self.peers.pop(key)
        a.members.remove(key)
        a.index.pop(key, None)
        for r in ROLES:
            if a.ics[r] == key:
                a.ics[r] = None
        if reason is not None:
            self.retired[key] = RetiredRecord(p.node_id, p.cp, p.sr, a.uid, reason)
            if reason == "leave":
                a.offline.add(key)

    def _after_shrink(self, a: AutonomousSystem) -> list:
        """Dissolve an undersized AS into its neighbours and compact empty slots."""
        events = []
        if a.uid not in self.ases:
            return events
        if a.members and len(a) < self.params.min_as_size:
            moves = {}
            reserved: dict[int, int] = {}
            for key in sorted(a.members, key=self._sr_key):
                best = None
                for b in self.ordered_ases():
                    if b is a or not b.members:
                        continue
                    if len(b) + reserved.get(b.uid, 0) >= self.params.max_as_size:
                        continue
                    score = (0 if b.cp == a.cp else 1, self.d_avg(self.peers[key].coord, b), b.slot)
                    if best is None or score < best[0]:
                        best = (score, b)
                if best is None:
                    moves = None
                    break
                moves[key] = best[1]
                reserved[best[1].uid] = reserved.get(best[1].uid, 0) + 1
            if moves:
                for key, b in moves.items():
                    p = self.peers.pop(key)
                    a.members.remove(key)
                    self.peers[key] = p
                    self._add_member(b, key)
                a.ics = {r: None for r in ROLES}
                events.append({"dissolved": a.uid, "into": sorted({b.uid for b in moves.values()})})
                self._refresh(list(moves.values()))
        if not a.members:
            events.append(self._compact(a))
        return events

    def _compact(self, a: AutonomousSystem) -> dict:
        s = a.slot
        old_neighbors = self.level_neighbors(a) + self.layer_neighbors(a)
        last_uid = self.slots[-1]
        z = self.ases[last_uid]
        z_neighbors = self.level_neighbors(z) + self.layer_neighbors(z)
        del self.ases[a.uid]
        event = {"defunct": a.uid, "slot": s, "position": self.position(s)}
        if last_uid == a.uid:
            self.slots.pop()
            self._refresh(b for b in old_neighbors if b.uid in self.ases)
            return event
        self.slots.pop()
        self.slots[s] = z.uid
        z.slot = s
        for key in z.members:
            self._assign_id(z, key, t=self.peers[key].node_id.node_index)
        z.links.clear()
        event["refilled_by"] = z.uid
        self._refresh([z] + [b for b in old_neighbors + z_neighbors if b.uid in self.ases])
        return event

    # ---------------------------------------------------------------- leaving
    def leave_normal(self, key: int) -> LeaveOutcome:
        if key not in self.peers:
            raise OverlayError(f"peer {key} is not live")
        a = self.as_of(key)
        role = a.role_of(key)
        if role == NN:
            self._remove_member(a, key, reason="leave")
            out = LeaveOutcome(key, NN, recipients=[(a.uid, "local")])
            self._refresh([a])
            self._after_shrink(a)
            return out
        a.departing.append(key)
        if a.departing[0] != key:
            raise OverlayError("another IC departure of this AS is still in flight")
        try:
            nns = sorted(a.nns(), key=self._sr_key)
            self._remove_member(a, key, reason="leave")
            if nns:
                sub = nns[0]
                a.ics[role] = sub
            else:
                sub = None
                self._reassign_by_priority(a)
            recipients = self._broadcast_role(a, role) if sub is not None else self._broadcast_all(a)
            out = LeaveOutcome(key, role, sub, recipients)
            self._sync(a)
            for b in self.level_neighbors(a) + self.layer_neighbors(a):
                self._sync(b)
        finally:
            a.departing.popleft()
        self._after_shrink(a)
        return out

    def _reassign_by_priority(self, a: AutonomousSystem):
        held = [k for k in (a.ics[r] for r in ROLES) if k is not None]
        a.ics = {r: (held[n] if n < len(held) else None) for n, r in enumerate(ROLES)}
        self._fill_vacancies(a)

    def leave_batch(self, keys: Sequence[int], check=None) -> list[LeaveOutcome]:
        """Serve leave requests first-come first-served, one departure at a time.

        ``check`` (if given) is called after every completed departure.
        """
        out = []
        for key in keys:
            out.append(self.leave_normal(key))
            if check is not None:
                check(self)
        return out

    def crash(self, keys: Iterable[int]) -> RecoveryReport:
        """Abnormal departure of a set of peers, followed by recovery."""
        keys = [k for k in dict.fromkeys(keys)]
        for k in keys:
            if k not in self.peers:
                raise OverlayError(f"peer {k} is not live")
        report = RecoveryReport()
        by_as: dict[int, list[int]] = {}
        for k in keys:
            by_as.setdefault(self.peers[k].as_uid, []).append(k)
        # snapshot neighbour-held backups before anything moves
        affected = sorted((self.ases[u] for u in by_as), key=lambda a: a.slot)
        holders = {a.uid: self.upper_level(a) for a in affected}
        for a in affected:
            lost = by_as[a.uid]
            lost_roles = [r for r in ROLES if a.ics[r] in lost]
            held_roles = [r for r in ROLES if a.ics[r] is not None]
            for k in lost:
                self._remove_member(a, k, reason="crash")
            action = {"as": a.uid, "crashed": sorted(lost), "roles_lost": lost_roles}
            if not a.members:
                report.defunct.append(a.uid)
                action["kind"] = "defunct"
            elif lost_roles and len(lost_roles) == len(held_roles):
                action.update(self._recover_all_ics(a, holders[a.uid]))
            elif lost_roles:
                action["kind"] = "partial"
                for role in lost_roles:
                    nns = sorted(a.nns(), key=self._sr_key)
                    if nns:
                        a.ics[role] = nns[0]
                if any(a.ics[r] is None for r in ROLES):
                    self._reassign_by_priority(a)
                action["new_ics"] = dict(a.ics)
                for role in lost_roles:
                    self._broadcast_role(a, role)
            else:
                action["kind"] = "nn"
            report.actions.append(action)
        touched = [self.ases[u] for u in by_as if u in self.ases]
        self._refresh(touched)
        for a in sorted(touched, key=lambda a: -a.slot):
            if a.uid in self.ases:
                evs = self._after_shrink(a)
                report.actions.extend(evs)
        return report

    def _recover_all_ics(self, a: AutonomousSystem, holder) -> dict:
        """Full Tri-IC crash: the upper-level neighbour re-seeds the AS from its backup."""
        a.index = {}                       # the crashed ICs took the live index with them
        backup = holder.backups.get(a.uid) if holder is not None else None
        if backup is not None and backup.kind == "level":
            restored = {k: v[0] for k, v in backup.entries.items() if k in a.members}
            source = ("level-backup", holder.uid)
        else:
            # no level-path holder: surviving NNs resubmit their own records
            restored = {k: self.peers[k].files for k in a.members}
            source = ("resubmission", None)
        survivors = sorted(a.members, key=self._sr_key)
        a.ics = {r: None for r in ROLES}
        a.ics["level"] = survivors[0]
        for role, k in zip(("local", "layer"), survivors[1:3]):
            a.ics[role] = k
        a.index = restored
        recipients = self._broadcast_all(a)
        return {"kind": "full", "new_ics": dict(a.ics), "restored_from": source,
                "restored_index": {k: sorted(v) for k, v in restored.items()},
                "recipients": recipients}

    # --------------------------------------------------------------- status
    def burst_update(self, key: int, new_status: str) -> list[tuple]:
        """Set a peer's status; a change *into* free triggers one exchange with IC_local."""
        if new_status not in STATUSES:
            raise ValueError(f"unknown status {new_status!r}")
        p = self.peers[key]
        old, p.status = p.status, new_status
        if new_status == "free" and old != "free":
            a = self.as_of(key)
            return [("exchange", key, a.ics["local"])]
        return []

    def process_events(self, events: Iterable[tuple]):
        for ev in events:
            if ev[0] != "exchange":
                continue
            key = ev[1]
            if key not in self.peers:
                continue
            a = self.as_of(key)
            a.index[key] = self.peers[key].files
            self._sync(a)

    # ---------------------------------------------------------------- export
    def edges(self) -> list[tuple[int, int]]:
        out = set()

        def add(u, v):
            if u is not None and v is not None and u != v:
                out.add((min(u, v), max(u, v)))

        for a in self.ordered_ases():
            ics = [a.ics[r] for r in ROLES]
            for x in range(3):
                for y in range(x + 1, 3):
                    add(ics[x], ics[y])
            for k in a.nns():
                add(k, a.ics["local"])
            up = self.upper_level(a)
            if up is not None:
                add(a.ics["level"], up.ics["level"])
            upl = self.upper_layer(a)
            if upl is not None:
                add(a.ics["layer"], upl.ics["layer"])
        return sorted(out)

    def as_graph(self) -> Graph:
        """Search graph: NNs are passive; ICs answer from the indexes they hold."""
        g = Graph.from_edges(sorted(self.peers), self.edges())
        for a in self.ordered_ases():
            own = frozenset(a.members)
            for r in ("local", "layer"):
                if a.ics[r] is not None:
                    g.covers[a.ics[r]] = own
            lv = a.ics["level"]
            if lv is not None:
                cov = set(own)
                for b in self.lower_levels(a):
                    bk = a.backups.get(b.uid)
                    if bk is not None and bk.kind == "level":
                        cov.update(k for k in bk.entries if k in self.peers)
                g.covers[lv] = frozenset(cov)
            g.passive.update(a.nns())
        return g

    def degrees(self) -> dict[int, int]:
        deg = {k: 0 for k in self.peers}
        for u, v in self.edges():
            deg[u] += 1
            deg[v] += 1
        return deg

    def link_degrees(self) -> dict[int, int]:
        """Same numbers as ``degrees`` but counted per AS, without listing edges."""
        deg = dict.fromkeys(self.peers, 0)
        n = len(self.slots)
        for uid in self.slots:
            a = self.ases[uid]
            ics = [k for k in a.ics.values() if k is not None]
            for k in ics:
                deg[k] += len(ics) - 1
            local = a.ics["local"]
            if local is not None:
                nns = len(a.members) - len(ics)
                deg[local] += nns
                for k in a.members:
                    if k not in ics:
                        deg[k] += 1
            up, _, upl, _ = self._geometry(a.slot)
            if up is not None and up < n:
                b = self.ases[self.slots[up]]
                if a.ics["level"] is not None and b.ics["level"] is not None:
                    deg[a.ics["level"]] += 1
                    deg[b.ics["level"]] += 1
            if upl is not None and upl < n:
                b = self.ases[self.slots[upl]]
                if a.ics["layer"] is not None and b.ics["layer"] is not None:
                    deg[a.ics["layer"]] += 1
                    deg[b.ics["layer"]] += 1
        return deg

    def heights(self) -> tuple[dict, int]:
        levels: dict[int, set] = {}
        for s in range(len(self.slots)):
            i, j, _ = self.position(s)
            levels.setdefault(i, set()).add(j)
        return {i: len(js) for i, js in sorted(levels.items())}, len(levels)

    def check_structure(self) -> StructureReport:
        """Verify degree, height, membership, IC-table and link-table invariants."""
        p = self.params
        violations = []
        deg = self.link_degrees()
        max_deg = max(deg.values(), default=0)
        if max_deg > p.d + 4:
            violations += [f"degree {dg} > d+4 at peer {k}" for k, dg in deg.items() if dg > p.d + 4]
        M = len(self.slots)
        per_layer, layers = self.heights()
        if M >= p.d:
            for i, h in per_layer.items():
                if not p.d ** (h - 1) < M:
                    violations.append(f"layer {i} has {h} levels, not < log_d({M})+1")
            if not p.d ** (layers - 1) < M:
                violations.append(f"{layers} layers, not < log_d({M})+1")
        seen = {}
        for uid in self.slots:
            a = self.ases[uid]
            if len(a.members) > p.max_as_size:
                violations.append(f"AS {a.uid} has {len(a.members)} members > d+3")
            if not a.members:
                violations.append(f"empty AS {a.uid} still holds slot {a.slot}")
            ics = [k for k in a.ics.values() if k is not None]
            if len(set(ics)) != len(ics) or any(k not in a.members for k in ics):
                violations.append(f"AS {a.uid} has an inconsistent IC table {a.ics}")
            if len(ics) < min(3, len(a.members)):
                violations.append(f"AS {a.uid} leaves an IC role vacant with NNs available")
            for k in a.members:
                if k in seen:
                    violations.append(f"peer {k} in ASs {seen[k]} and {a.uid}")
                seen[k] = a.uid
                if self.peers[k].as_uid != a.uid:
                    violations.append(f"peer {k} points at AS {self.peers[k].as_uid}, lives in {a.uid}")
            up, low, upl, lowl = self._geometry(a.slot)
            for s in ((up,) if up is not None else ()) + low:
                if s < M and self.ases[self.slots[s]].links.get(a.uid) != a.ics["level"]:
                    violations.append(f"AS {self.slots[s]} holds a stale IC_level for AS {a.uid}")
            for s in ((upl,) if upl is not None else ()) + lowl:
                if s < M and self.ases[self.slots[s]].links.get(a.uid) != a.ics["layer"]:
                    violations.append(f"AS {self.slots[s]} holds a stale IC_layer for AS {a.uid}")
        if len(seen) != len(self.peers):
            violations.append("membership does not partition the live peers")
        ids = [pp.node_id for pp in self.peers.values()]
        if len(set(ids)) != len(ids):
            violations.append("duplicate node ids among live peers")
        return StructureReport(max_deg, M, per_layer, layers, violations)

    def snapshot(self) -> dict:
        """Plain-data dump (JSON-serializable) of nodes, roles, ASs, edges and SR."""
        nodes = []
        for key in sorted(self.peers):
            pp = self.peers[key]
            a = self.ases[pp.as_uid]
            nodes.append({"key": key, "id": list(pp.node_id), "packed": str(pp.node_id.packed),
                          "role": a.role_of(key), "status": pp.status, "sr": pp.sr,
                          "as": a.uid, "x": pp.coord.x, "y": pp.coord.y,
                          "files": sorted(pp.files)})
        ases = [{"uid": a.uid, "slot": a.slot, "position": list(self.position(a.slot)),
                 "members": list(a.members), "ics": dict(a.ics)} for a in self.ordered_ases()]
        p = self.params
        return {"schema": "mposim.overlay/1",
                "params": {"d": p.d, "root_width": p.root_width,
                           "levels_per_layer": p.levels_per_layer, "min_as_size": p.min_as_size},
                "nodes": nodes, "ases": ases, "edges": [list(e) for e in self.edges()]}

    def clone(self) -> "Overlay":
        return copy.deepcopy(self)


def check_snapshot(snap: dict) -> StructureReport:
    """Re-verify the degree and height bounds from a snapshot alone."""
    d = int(snap["params"]["d"])
    deg: dict[int, int] = {n["key"]: 0 for n in snap["nodes"]}
    for u, v in snap["edges"]:
        deg[u] = deg.get(u, 0) + 1
        deg[v] = deg.get(v, 0) + 1
    violations = [f"degree {dg} > d+4 at peer {k}" for k, dg in sorted(deg.items()) if dg > d + 4]
    levels: dict[int, set] = {}
    for a in snap["ases"]:
        i, j, _ = a["position"]
        levels.setdefault(i, set()).add(j)
        if len(a["members"]) > d + 3:
            violations.append(f"AS {a['uid']} has {len(a['members'])} members > d+3")
    M = len(snap["ases"])
    per_layer = {i: len(js) for i, js in sorted(levels.items())}
    if M >= d:
        for i, h in per_layer.items():
            if not d ** (h - 1) < M:
                violations.append(f"layer {i} has {h} levels, not < log_d({M})+1")
        if not d ** (len(levels) - 1) < M:
            violations.append(f"{len(levels)} layers, not < log_d({M})+1")
    return StructureReport(max(deg.values(), default=0), M, per_layer, len(levels), violations)


def make_peers(coords: Sequence[Coordinate], params: MPOParams, files: dict | None = None,
               tolerance: float = math.inf, start_key: int = 0) -> list[Peer]:
    files = files or {}
    return [Peer(key=start_key + n, coord=c, cp=region_label(c, params.spread, params.cp_cells),
                 tolerance=tolerance, files=frozenset(files.get(start_key + n, ())))
            for n, c in enumerate(coords)]


def bootstrap_overlay(peers: Sequence[Peer], params: MPOParams | None = None) -> Overlay:
    """Form the initial overlay around the origin node, then retire the origin."""
    if not peers:
        raise OverlayError("bootstrap needs at least one peer")
    ov = Overlay(params)
    ov._place_bootstrap(peers)
    ov.elect_all()
    ov.origin_active = False
    return ov


def warmup(ov: Overlay, catalog_vectors: np.ndarray, rng: RngStream, n_exchanges: int,
           reelect: bool = True) -> None:
    """Simulated intra-AS exchanges that give peers non-trivial SR values.

    A random peer asks a random AS-mate for a random file's requirement
    vector; the answer's similarity is the best match among the mate's files
    (zero for non-cooperative peers or peers hosting nothing).
    """
    keys = sorted(ov.peers)
    m = len(catalog_vectors)
    for _ in range(n_exchanges):
        i = keys[int(rng.integers(len(keys)))]
        a = ov.as_of(i)
        mates = [k for k in a.members if k != i]
        if not mates:
            continue
        j = mates[int(rng.integers(len(mates)))]
        want = catalog_vectors[int(rng.integers(m))]
        pj = ov.peers[j]
        if pj.cooperative and pj.files:
            qsim = max(query_similarity(want, catalog_vectors[f - 1]) for f in pj.files)
        else:
            qsim = 0.0
        ov.exchange(i, j, qsim, float(rng.uniform(0.5, 1.5)))
    if reelect:
        ov.elect_all()


def snapshot_json(ov: Overlay) -> str:
    return json.dumps(ov.snapshot(), sort_keys=True)
