"""Rooms, maps and two-level models, plus stitching into one explicit MDP.

Rooms may be shared by several vertices.  Each vertex carries a renaming
from the room's local direction names to neighbouring vertices, so the
half-edge ``(v, u)`` corresponds to the local direction ``d`` with
``labeling[v].directions[d] == u``.

Entrance distributions are keyed by the local direction of the edge
through which the room is entered, exit sets by the local direction of the
edge through which it is left.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import (
    DirectionMismatch,
    ExitOverlap,
    InitialDirectionInvalid,
    InvalidMap,
    InvalidPath,
    InvalidRoom,
    MissingEntrance,
    ModelError,
    NonStochasticRow,
)
from .mdp import ROW_TOL, Mdp

HalfEdge = tuple[str, str]


@dataclass(frozen=True, eq=False)
class Room:
    """MDP fragment with directions, entrances, exits, bad states and a reset.

    ``mdp.initial`` is the room's training initial distribution, which is
    also the row of every action at ``reset``.
    """

    name: str
    mdp: Mdp
    directions: tuple[str, ...]
    entrance: Mapping[str, np.ndarray]
    exits: Mapping[str, frozenset[int]]
    bad: frozenset[int]
    reset: int
    state_labels: tuple | None = field(default=None, repr=False)

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    @cached_property
    def exit_direction(self) -> np.ndarray:
        """Per state, the index into ``directions`` of its exit set, or -1."""
        out = np.full(self.n_states, -1, dtype=np.int64)
        for i, d in enumerate(self.directions):
            out[list(self.exits.get(d, ()))] = i
        return out

    def exit_mask(self, direction: str) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.exits[direction])] = True
        return mask

    def bad_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.bad)] = True
        return mask

    def validate(self) -> None:
        if len(set(self.directions)) != len(self.directions):
            raise InvalidRoom(f"room {self.name}: duplicate direction names")
        if not (0 <= self.reset < self.n_states):
            raise InvalidRoom(f"room {self.name}: reset index {self.reset} out of range")
        owner: dict[int, str] = {}
        for d, states in self.exits.items():
            if d not in self.directions:
                raise DirectionMismatch(f"room {self.name}: exit set for unknown direction {d!r}")
            for s in states:
                if not (0 <= s < self.n_states):
                    raise InvalidRoom(f"room {self.name}: exit state {s} out of range")
                if s in owner:
                    raise ExitOverlap(
                        f"room {self.name}: state {s} lies in the exits of {owner[s]!r} and {d!r}"
                    )
                owner[s] = d
        if self.reset in owner:
            raise InvalidRoom(f"room {self.name}: reset state {self.reset} is an exit state")
        for s in self.bad:
            if not (0 <= s < self.n_states):
                raise InvalidRoom(f"room {self.name}: bad state {s} out of range")
        for d, dist in self.entrance.items():
            if d not in self.directions:
                raise DirectionMismatch(f"room {self.name}: entrance for unknown direction {d!r}")
            dist = np.asarray(dist)
            if dist.shape != (self.n_states,):
                raise InvalidRoom(f"room {self.name}: entrance {d!r} has the wrong length")
            if np.any(dist < 0) or abs(dist.sum() - 1.0) > ROW_TOL:
                raise NonStochasticRow(f"room {self.name}: entrance {d!r} is not a distribution")
            if dist[self.reset] > 0:
                raise InvalidRoom(f"room {self.name}: entrance {d!r} puts mass on the reset state")
        for a in self.mdp.actions_at(self.reset):
            if np.max(np.abs(self.mdp.row(self.reset, a) - self.mdp.initial)) > ROW_TOL:
                raise InvalidRoom(
                    f"room {self.name}: reset row for action {int(a)} differs from the training initial distribution"
                )

    # ---- serialization -----------------------------------------------
    def to_json(self) -> dict:
        return {
            "name": self.name,
            "mdp": self.mdp.to_json(),
            "directions": list(self.directions),
            "entrance": {
                d: [[int(s), float(p)] for s, p in enumerate(dist) if p > 0]
                for d, dist in self.entrance.items()
            },
            "exits": {d: sorted(int(s) for s in states) for d, states in self.exits.items()},
            "bad": sorted(int(s) for s in self.bad),
            "reset": int(self.reset),
        }

    @classmethod
    def from_json(cls, data: dict, name: str | None = None) -> "Room":
        try:
            mdp = Mdp.from_json(data["mdp"])
            entrance = {}
            for d, pairs in data["entrance"].items():
                dist = np.zeros(mdp.n_states)
                for s, p in pairs:
                    dist[int(s)] += float(p)
                entrance[str(d)] = dist
            return cls(
                name=str(data.get("name", name)),
                mdp=mdp,
                directions=tuple(str(d) for d in data["directions"]),
                entrance=entrance,
                exits={str(d): frozenset(int(s) for s in v) for d, v in data["exits"].items()},
                bad=frozenset(int(s) for s in data.get("bad", [])),
                reset=int(data["reset"]),
            )
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            if isinstance(exc, ModelError):
                raise
            raise ModelError(f"malformed room JSON: {exc}") from exc


@dataclass(frozen=True, eq=False)
class MapGraph:
    """Undirected graph stored as sorted half-edges."""

    vertices: tuple[str, ...]
    edges: frozenset[frozenset[str]]

    @classmethod
    def build(cls, vertices: Iterable, edges: Iterable[Sequence]) -> "MapGraph":
        verts = tuple(sorted({str(v) for v in vertices}))
        vset = set(verts)
        es = set()
        for e in edges:
            if len(e) != 2:
                raise InvalidMap(f"edge {e!r} does not have two endpoints")
            v, u = str(e[0]), str(e[1])
            if v == u:
                raise InvalidMap(f"self-loop at vertex {v}")
            if v not in vset or u not in vset:
                raise InvalidMap(f"edge ({v}, {u}) mentions an unknown vertex")
            es.add(frozenset((v, u)))
        graph = cls(verts, frozenset(es))
        for v in verts:
            if not graph.neighbors(v):
                raise InvalidMap(f"vertex {v} has no neighbour")
        return graph

    @cached_property
    def _adjacency(self) -> dict[str, tuple[str, ...]]:
        adj: dict[str, list[str]] = {v: [] for v in self.vertices}
        for e in self.edges:
            v, u = tuple(e)
            adj[v].append(u)
            adj[u].append(v)
        return {v: tuple(sorted(ns)) for v, ns in adj.items()}

    def neighbors(self, v: str) -> tuple[str, ...]:
        return self._adjacency[v]

    def out(self, v: str) -> tuple[HalfEdge, ...]:
        return tuple((v, u) for u in self._adjacency[v])

    @cached_property
    def half_edges(self) -> tuple[HalfEdge, ...]:
        return tuple((v, u) for v in self.vertices for u in self._adjacency[v])

    @cached_property
    def half_edge_index(self) -> dict[HalfEdge, int]:
        return {e: i for i, e in enumerate(self.half_edges)}

    def to_json(self) -> dict:
        return {
            "vertices": list(self.vertices),
            "edges": sorted(sorted(e) for e in self.edges),
        }


@dataclass(frozen=True)
class VertexLabel:
    room: str
    directions: Mapping[str, str]  # local direction -> neighbouring vertex

    @cached_property
    def by_neighbor(self) -> dict[str, str]:
        return {u: d for d, u in self.directions.items()}


@dataclass(frozen=True, eq=False)
class TwoLevelModel:
    graph: MapGraph
    rooms: Mapping[str, Room]
    labeling: Mapping[str, VertexLabel]
    v0: str
    d0: HalfEdge
    d1: HalfEdge
    targets: frozenset[str]

    def room(self, v: str) -> Room:
        return self.rooms[self.labeling[v].room]

    def local_direction(self, v: str, u: str) -> str:
        """Local direction name of half-edge ``(v, u)`` in the room at ``v``."""
        try:
            return self.labeling[v].by_neighbor[u]
        except KeyError:
            raise DirectionMismatch(f"vertex {v} has no direction towards {u}") from None

    def exits(self, v: str, u: str) -> frozenset[int]:
        return self.room(v).exits.get(self.local_direction(v, u), frozenset())

    def entrance(self, u: str, from_v: str) -> np.ndarray:
        """I_{l(u)}(. | d) for the room at ``u`` entered through the edge to ``from_v``."""
        d = self.local_direction(u, from_v)
        room = self.room(u)
        if d not in room.entrance:
            raise MissingEntrance(f"room {room.name} at vertex {u} has no entrance for direction {d!r}")
        return np.asarray(room.entrance[d])

    def initial_entrance(self) -> np.ndarray:
        """Entrance distribution at ``v0`` given by the entry direction ``d0``."""
        return self.entrance(self.v0, self.d0[1])

    def key(self, v: str, u: str) -> tuple[str, str]:
        """(room name, local direction) for half-edge ``(v, u)``."""
        return self.labeling[v].room, self.local_direction(v, u)

    # ---- serialization -----------------------------------------------
    def to_json(self) -> dict:
        return {
            "map": self.graph.to_json(),
            "rooms": {name: room.to_json() for name, room in self.rooms.items()},
            "labeling": {
                v: {"room": lab.room, "directions": dict(lab.directions)}
                for v, lab in self.labeling.items()
            },
            "v0": self.v0,
            "d0": list(self.d0),
            "d1": list(self.d1),
            "targets": sorted(self.targets),
        }

    @classmethod
    def from_json(cls, data: dict | str, check: bool = True) -> "TwoLevelModel":
        if isinstance(data, str):
            data = json.loads(data)
        try:
            graph = MapGraph.build(data["map"]["vertices"], data["map"]["edges"])
            rooms = {str(n): Room.from_json(r, str(n)) for n, r in data["rooms"].items()}
            labeling = {
                str(v): VertexLabel(
                    str(lab["room"]), {str(d): str(u) for d, u in lab["directions"].items()}
                )
                for v, lab in data["labeling"].items()
            }
            h = cls(
                graph,
                rooms,
                labeling,
                str(data["v0"]),
                (str(data["d0"][0]), str(data["d0"][1])),
                (str(data["d1"][0]), str(data["d1"][1])),
                frozenset(str(t) for t in data.get("targets", [])),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ModelError(f"malformed two-level model JSON: {exc!r}") from exc
        if check:
            validate(h)
        return h


def validate(h: TwoLevelModel) -> None:
    """Raise the first invariant violation found in ``h``."""
    g = h.graph
    for v in g.vertices:
        if v not in h.labeling:
            raise InvalidMap(f"vertex {v} has no room label")
        lab = h.labeling[v]
        if lab.room not in h.rooms:
            raise InvalidRoom(f"vertex {v} is labelled with unknown room {lab.room!r}")
        room = h.rooms[lab.room]
        if set(lab.directions) != set(room.directions):
            raise DirectionMismatch(
                f"vertex {v}: renaming covers {sorted(lab.directions)} but room {room.name} has {sorted(room.directions)}"
            )
        targets = sorted(lab.directions.values())
        if targets != sorted(g.neighbors(v)) or len(set(targets)) != len(targets):
            raise DirectionMismatch(
                f"vertex {v}: directions point to {targets}, neighbours are {list(g.neighbors(v))}"
            )
    for v in set(h.labeling) - set(g.vertices):
        raise InvalidMap(f"label for unknown vertex {v}")
    for room in h.rooms.values():
        room.validate()
    for v in g.vertices:
        for u in g.neighbors(v):
            d = h.local_direction(u, v)
            if d not in h.room(u).entrance:
                raise MissingEntrance(
                    f"room {h.room(u).name} at vertex {u} lacks an entrance for direction {d!r} (from {v})"
                )
    if h.v0 not in g.vertices:
        raise InitialDirectionInvalid(f"initial vertex {h.v0} is not in the map")
    for name, d in (("d0", h.d0), ("d1", h.d1)):
        if d[0] != h.v0 or d not in g.out(h.v0):
            raise InitialDirectionInvalid(f"{name} = {d} is not an outgoing half-edge of v0 = {h.v0}")
    for t in h.targets:
        if t not in g.vertices:
            raise InvalidMap(f"target {t} is not a vertex")


@dataclass(frozen=True, eq=False)
class ExplicitMdp:
    mdp: Mdp
    states: tuple[tuple[int, str], ...]
    index: Mapping[tuple[int, str], int]
    exit_action: int

    def vertex_of(self, i: int) -> str:
        return self.states[i][1]


def stitch_explicit_mdp(
    h: TwoLevelModel, keep_room_actions: bool = False, global_reset: bool = False
) -> ExplicitMdp:
    """Flatten ``h`` into one MDP over pairs (room state, vertex).

    Exit states enable ``a_exit`` (the last action index), whose row is the
    next room's entrance distribution.  With ``keep_room_actions`` they also
    keep their room actions; with ``global_reset`` every room's reset state
    restarts the whole model instead of its own room.
    """
    validate(h)
    g = h.graph
    offsets = {}
    states: list[tuple[int, str]] = []
    for v in g.vertices:
        offsets[v] = len(states)
        states.extend((s, v) for s in range(h.room(v).n_states))
    n = len(states)
    n_room_actions = max(r.mdp.n_actions for r in h.rooms.values())
    a_exit = n_room_actions
    initial = np.zeros(n)
    initial[offsets[h.v0]: offsets[h.v0] + h.room(h.v0).n_states] = h.initial_entrance()

    ps, pa, indptr, dest, prob = [], [], [0], [], []

    def emit(s_idx, a, ds, pr):
        ps.append(s_idx)
        pa.append(a)
        dest.extend(ds)
        prob.extend(pr)
        indptr.append(len(dest))

    for v in g.vertices:
        room = h.room(v)
        lab = h.labeling[v]
        off = offsets[v]
        rm = room.mdp
        for s in range(room.n_states):
            e = room.exit_direction[s]
            is_exit = e >= 0
            if global_reset and s == room.reset:
                for a in rm.actions_at(s):
                    nz = np.flatnonzero(initial)
                    emit(off + s, int(a), nz, initial[nz])
                continue
            if not is_exit or keep_room_actions:
                for a in rm.actions_at(s):
                    k = rm.pair_id[s, a]
                    lo, hi = rm.indptr[k], rm.indptr[k + 1]
                    emit(off + s, int(a), rm.dest[lo:hi] + off, rm.prob[lo:hi])
            if is_exit:
                u = lab.directions[room.directions[e]]
                ent = h.entrance(u, v)
                nz = np.flatnonzero(ent)
                emit(off + s, a_exit, nz + offsets[u], ent[nz])
    mdp = Mdp.from_arrays(n, n_room_actions + 1, ps, pa, indptr, dest, prob, initial)
    index = {st: i for i, st in enumerate(states)}
    return ExplicitMdp(mdp, tuple(states), index, a_exit)


def path_projection(explicit: ExplicitMdp, path: Sequence) -> list[str]:
    """Vertex sequence visited by an explicit path (consecutive duplicates removed).

    ``path`` is a list of (state, action, next state) triples or of states.
    """
    if not len(path):
        raise InvalidPath("empty path")
    mdp = explicit.mdp
    if isinstance(path[0], (tuple, list)) and len(path[0]) == 3:
        states = [path[0][0]]
        for i, (s, a, t) in enumerate(path):
            if s != states[-1]:
                raise InvalidPath(f"step {i} starts at {s} but the previous step ended at {states[-1]}")
            if not (0 <= s < mdp.n_states and 0 <= t < mdp.n_states) or mdp.pair_id[s, a] < 0:
                raise InvalidPath(f"step {i}: action {a} is not enabled at state {s}")
            if mdp.row(s, a)[t] <= 0:
                raise InvalidPath(f"step {i}: transition {s} -> {t} has probability zero")
            states.append(t)
    else:
        states = list(path)
        for s in states:
            if not (0 <= s < mdp.n_states):
                raise InvalidPath(f"state {s} out of range")
        for i, (s, t) in enumerate(zip(states, states[1:])):
            ok = any(mdp.row(s, a)[t] > 0 for a in mdp.actions_at(s))
            if not ok:
                raise InvalidPath(f"step {i}: no action moves {s} to {t}")
    out: list[str] = []
    for s in states:
        v = explicit.vertex_of(s)
        if not out or out[-1] != v:
            out.append(v)
    return out


def load_model(path: str) -> TwoLevelModel:
    with open(path) as fh:
        return TwoLevelModel.from_json(json.load(fh))


def save_model(h: TwoLevelModel, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(h.to_json(), fh)


def training_mdp(room: Room, direction: str) -> Mdp:
    """Room MDP where reaching the exits of ``direction`` restarts the room.

    Every enabled action at an exit state of ``direction`` leads to the reset
    state; the initial distribution is the room's training initial.
    """
    mdp = room.mdp
    exits = room.exit_mask(direction)
    ps, pa, indptr, dest, prob = [], [], [0], [], []
    for k in range(mdp.n_pairs):
        s = mdp.pair_state[k]
        ps.append(s)
        pa.append(mdp.pair_action[k])
        if exits[s]:
            dest.append(room.reset)
            prob.append(1.0)
        else:
            lo, hi = mdp.indptr[k], mdp.indptr[k + 1]
            dest.extend(mdp.dest[lo:hi])
            prob.extend(mdp.prob[lo:hi])
        indptr.append(len(dest))
    return Mdp.from_arrays(mdp.n_states, mdp.n_actions, ps, pa, indptr, dest, prob, mdp.initial)


def training_objective_sets(room: Room, direction: str) -> tuple[np.ndarray, np.ndarray]:
    """(target, avoid) masks of the low-level objective: exit via ``direction``, avoid bad states and reset."""
    good = room.exit_mask(direction)
    bad = room.bad_mask()
    bad[room.reset] = True
    return good & ~bad, bad
