"""Grid-world rooms with stochastic adversaries and life points.

A room is an ASCII layout: ``#`` wall, ``.`` floor and a direction letter
(``N``, ``E``, ``S``, ``W``) for door cells on the border.  The agent may
stand on doors; standing on a door of direction ``d`` with at least one
life point is an exit state of ``d``.  Adversaries move on plain floor
cells only.  Entering through direction ``d`` puts the agent on the floor
cell next to a door of ``d``.

The same successor function drives the exact tabular export
(:func:`build_room`) and the step simulator (:class:`GridSimulator`); the
simulator additionally supports power-ups, which are too costly to
enumerate.
"""

from __future__ import annotations

import itertools
import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidMap, InvalidRoom, StateSpaceTooLarge
from .mdp import Mdp
from .twolevel import MapGraph, Room, TwoLevelModel, VertexLabel

Cell = tuple[int, int]

ACTIONS = ("N", "E", "S", "W")
MOVES: dict[str, Cell] = {"N": (0, -1), "E": (1, 0), "S": (0, 1), "W": (-1, 0)}
OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}
BEHAVIORS = ("random", "chaser", "wall-follower")

CHASE_WEIGHT = 0.8
FOLLOW_WEIGHT = 0.9
DEFAULT_CAP = 200_000

# (blocked side, move) pairs scanned in order by the wall follower; keeps
# the wall on the adversary's left
_LEFT_HAND = (("W", "N"), ("N", "E"), ("E", "S"), ("S", "W"))


def _step(cell: Cell, move: str) -> Cell:
    dx, dy = MOVES[move]
    return (cell[0] + dx, cell[1] + dy)


@dataclass(frozen=True)
class GridRoomConfig:
    """Layout, adversaries and counters of one grid room.

    ``step_limit`` adds a step counter to the state; the room resets when
    it is reached.  ``entry_radius`` confines entering adversaries to floor
    cells within that L1 distance of the door the agent came through (they
    followed it in); ``None`` lets them start anywhere.  ``powerup_prob`` is the per-step chance that a power-up
    appears when none is present; it is only supported by the simulator.
    """

    layout: tuple[str, ...]
    adversaries: tuple[str, ...] = ()
    lives: int = 1
    step_limit: int | None = None
    powerup_prob: float = 0.0
    powerup_duration: int = 5
    name: str = "grid"
    entry_radius: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layout", tuple(self.layout))
        object.__setattr__(self, "adversaries", tuple(self.adversaries))

    @classmethod
    def from_ascii(cls, text: str, **kwargs) -> "GridRoomConfig":
        rows = tuple(line.strip() for line in text.strip().splitlines() if line.strip())
        cfg = cls(rows, **kwargs)
        cfg.validate()
        return cfg

    @property
    def width(self) -> int:
        return len(self.layout[0])

    @property
    def height(self) -> int:
        return len(self.layout)

    def char(self, cell: Cell) -> str:
        x, y = cell
        if 0 <= x < self.width and 0 <= y < self.height:
            return self.layout[y][x]
        return "#"

    @property
    def cells(self) -> tuple[Cell, ...]:
        """Cells the agent may occupy (floor and doors), row-major."""
        return tuple(
            (x, y) for y in range(self.height) for x in range(self.width) if self.layout[y][x] != "#"
        )

    @property
    def floor(self) -> tuple[Cell, ...]:
        """Cells adversaries may occupy."""
        return tuple(c for c in self.cells if self.char(c) == ".")

    @property
    def doors(self) -> dict[str, tuple[Cell, ...]]:
        out: dict[str, list[Cell]] = {}
        for c in self.cells:
            ch = self.char(c)
            if ch in MOVES:
                out.setdefault(ch, []).append(c)
        return {d: tuple(v) for d, v in sorted(out.items())}

    @property
    def directions(self) -> tuple[str, ...]:
        return tuple(self.doors)

    def entry_cells(self, direction: str) -> tuple[Cell, ...]:
        out = []
        for c in self.doors[direction]:
            inner = _step(c, OPPOSITE[direction])
            if self.char(inner) == "." and inner not in out:
                out.append(inner)
        return tuple(out)

    def validate(self) -> None:
        if not self.layout or any(len(r) != self.width for r in self.layout):
            raise InvalidRoom(f"room {self.name}: layout rows must be non-empty and of equal width")
        bad_chars = set("".join(self.layout)) - set("#.") - set(MOVES)
        if bad_chars:
            raise InvalidRoom(f"room {self.name}: unknown layout characters {sorted(bad_chars)}")
        for d, cells in self.doors.items():
            for x, y in cells:
                if x not in (0, self.width - 1) and y not in (0, self.height - 1):
                    raise InvalidRoom(f"room {self.name}: door {d} at {(x, y)} is not on the boundary")
            if not self.entry_cells(d):
                raise InvalidRoom(f"room {self.name}: direction {d} has no floor cell behind its door")
        if not self.directions:
            raise InvalidRoom(f"room {self.name}: no doors")
        for b in self.adversaries:
            if b not in BEHAVIORS:
                raise InvalidRoom(f"room {self.name}: unknown adversary behavior {b!r}")
        if self.lives < 1:
            raise InvalidRoom(f"room {self.name}: lives must be at least 1")
        if self.step_limit is not None and self.step_limit < 1:
            raise InvalidRoom(f"room {self.name}: step limit must be positive")
        if not (0.0 <= self.powerup_prob <= 1.0):
            raise InvalidRoom(f"room {self.name}: power-up probability must lie in [0, 1]")
        if self.adversaries and len(self.floor) < 2:
            raise InvalidRoom(f"room {self.name}: adversaries need at least two floor cells")
        if self.entry_radius is not None and self.entry_radius < 1:
            raise InvalidRoom(f"room {self.name}: entry radius must be positive")
        if self.adversaries:
            for d in self.directions:
                for a in self.entry_cells(d):
                    if not self.adversary_entry_cells(d, a):
                        raise InvalidRoom(f"room {self.name}: no adversary entry cell for direction {d}")

    def adversary_entry_cells(self, direction: str, agent: Cell) -> tuple[Cell, ...]:
        """Floor cells an adversary may occupy when the agent enters at ``agent``."""
        cells = [c for c in self.floor if c != agent]
        if self.entry_radius is None:
            return tuple(cells)
        doors = self.doors[direction]
        return tuple(
            c for c in cells if min(abs(c[0] - x) + abs(c[1] - y) for x, y in doors) <= self.entry_radius
        )

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "layout": list(self.layout),
            "adversaries": list(self.adversaries),
            "lives": self.lives,
            "step_limit": self.step_limit,
            "powerup_prob": self.powerup_prob,
            "powerup_duration": self.powerup_duration,
            "entry_radius": self.entry_radius,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "GridRoomConfig":
        cfg = cls(
            tuple(data["layout"]),
            tuple(data.get("adversaries", ())),
            int(data.get("lives", 1)),
            data.get("step_limit"),
            float(data.get("powerup_prob", 0.0)),
            int(data.get("powerup_duration", 5)),
            str(data.get("name", "grid")),
            data.get("entry_radius"),
        )
        cfg.validate()
        return cfg


class GridState(NamedTuple):
    agent: Cell
    adversaries: tuple[Cell, ...]
    life: int
    step: int = 0
    powerup: Cell | None = None
    shield: int = 0


# every state without life left is merged into this one
DEAD = GridState((-1, -1), (), 0)


# ---------------------------------------------------------------------------
# Adversaries


def _legal_moves(cfg: GridRoomConfig, cell: Cell) -> dict[str, Cell]:
    """Adversary moves (including ``stay``) onto plain floor cells."""
    out = {"stay": cell}
    for m in ACTIONS:
        nxt = _step(cell, m)
        if cfg.char(nxt) == ".":
            out[m] = nxt
    return out


def adversary_step(
    behavior: str, cfg: GridRoomConfig, cell: Cell, agent: Cell, rng: np.random.Generator | None = None
) -> dict[Cell, float] | Cell:
    """Distribution over the adversary's next cell; a sampled cell when ``rng`` is given.

    random: uniform over legal moves and staying.  chaser: 0.8 split over
    the moves that shrink the L1 distance to the agent (staying if none),
    0.2 uniform.  wall-follower: left-hand rule w.p. 0.9, the rest uniform
    over the other legal options.
    """
    legal = _legal_moves(cfg, cell)
    options = list(legal.values())
    dist: dict[Cell, float] = {}

    def add(c: Cell, p: float) -> None:
        dist[c] = dist.get(c, 0.0) + p

    if behavior == "random":
        for c in options:
            add(c, 1.0 / len(options))
    elif behavior == "chaser":
        here = abs(cell[0] - agent[0]) + abs(cell[1] - agent[1])
        closer = [c for c in options if abs(c[0] - agent[0]) + abs(c[1] - agent[1]) < here]
        for c in closer or [cell]:
            add(c, CHASE_WEIGHT / max(len(closer), 1))
        for c in options:
            add(c, (1 - CHASE_WEIGHT) / len(options))
    elif behavior == "wall-follower":
        chosen = None
        for side, move in _LEFT_HAND:
            if side not in legal and move in legal:
                chosen = legal[move]
                break
        if chosen is None:
            chosen = legal.get("W", cell)
        others = [c for c in options if c != chosen]
        if others:
            add(chosen, FOLLOW_WEIGHT)
            for c in others:
                add(c, (1 - FOLLOW_WEIGHT) / len(others))
        else:
            add(chosen, 1.0)
    else:
        raise InvalidRoom(f"unknown adversary behavior {behavior!r}")
    if rng is None:
        return dist
    cells = list(dist)
    return cells[int(rng.choice(len(cells), p=np.array([dist[c] for c in cells])))]


# ---------------------------------------------------------------------------
# Dynamics


def agent_move(cfg: GridRoomConfig, cell: Cell, action: int) -> Cell:
    nxt = _step(cell, ACTIONS[action])
    return nxt if cfg.char(nxt) != "#" else cell


def successors(cfg: GridRoomConfig, state: GridState, action: int) -> dict[GridState | None, float]:
    """Exact next-state distribution; ``None`` is the room reset."""
    if state.life == 0 or (cfg.step_limit is not None and state.step >= cfg.step_limit):
        return {None: 1.0}
    agent = agent_move(cfg, state.agent, action)
    per_adv = [
        list(adversary_step(b, cfg, c, state.agent).items()) for b, c in zip(cfg.adversaries, state.adversaries)
    ]
    step = state.step + 1 if cfg.step_limit is not None else 0
    out: dict[GridState | None, float] = {}
    for combo in itertools.product(*per_adv):
        advs = tuple(c for c, _ in combo)
        p = float(np.prod([q for _, q in combo])) if combo else 1.0
        hit = any(
            b == agent or (b == state.agent and old == agent) for b, old in zip(advs, state.adversaries)
        )
        life = state.life - 1 if hit and state.shield == 0 else state.life
        if life == 0:
            out[DEAD] = out.get(DEAD, 0.0) + p
            continue
        for (item, shield), q in _powerup_outcomes(cfg, state, agent).items():
            nxt = GridState(agent, advs, life, step, item, shield)
            out[nxt] = out.get(nxt, 0.0) + p * q
    return out


def _powerup_outcomes(cfg: GridRoomConfig, state: GridState, agent: Cell) -> dict:
    if cfg.powerup_prob == 0 and state.powerup is None:
        return {(None, max(state.shield - 1, 0)): 1.0}
    shield = max(state.shield - 1, 0)
    item = state.powerup
    if item is not None and item == agent:
        return {(None, cfg.powerup_duration): 1.0}
    if item is not None:
        return {(item, shield): 1.0}
    spots = [c for c in cfg.floor if c != agent]
    out = {(None, shield): 1.0 - cfg.powerup_prob}
    for c in spots:
        out[(c, shield)] = cfg.powerup_prob / len(spots)
    return out


def entrance_distribution(cfg: GridRoomConfig, direction: str) -> dict[GridState, float]:
    """Agent uniform over the entry cells of ``direction``, adversaries
    independent and uniform over their entry cells."""
    out: dict[GridState, float] = {}
    entries = cfg.entry_cells(direction)
    for a in entries:
        spots = cfg.adversary_entry_cells(direction, a)
        for advs in itertools.product(spots, repeat=len(cfg.adversaries)):
            s = GridState(a, tuple(advs), cfg.lives)
            out[s] = out.get(s, 0.0) + 1.0 / (len(entries) * len(spots) ** len(cfg.adversaries))
    return out


def state_count_bound(cfg: GridRoomConfig) -> int:
    """Number of tabular states: live configurations, the dead state and the reset."""
    steps = cfg.step_limit + 1 if cfg.step_limit is not None else 1
    live = len(cfg.cells) * len(cfg.floor) ** len(cfg.adversaries) * cfg.lives * steps
    return live + (1 if cfg.adversaries else 0) + 1


# ---------------------------------------------------------------------------
# Tabular export


@dataclass(frozen=True, eq=False)
class GridRoom:
    """A tabular room together with its layout and state decoding."""

    config: GridRoomConfig
    room: Room
    states: tuple[GridState, ...]
    index: Mapping[GridState, int] = field(repr=False)

    def encode(self, state: GridState | None) -> int:
        return self.room.reset if state is None else self.index[state]

    def decode(self, i: int) -> GridState | None:
        return None if i == self.room.reset else self.states[i]


def build_grid_room(cfg: GridRoomConfig, cap: int = DEFAULT_CAP) -> GridRoom:
    """Enumerate every live configuration and export a Room.

    States are (agent cell, adversary cells, life, step) with life >= 1,
    then the dead state when adversaries exist, then the reset.  The dead
    state is the only bad state; it, and states at the step limit, move to
    the reset.  The reset row is the uniform mixture of the entrances.
    """
    cfg.validate()
    if cfg.powerup_prob > 0:
        raise InvalidRoom(f"room {cfg.name}: power-ups are only supported by the simulator")
    count = state_count_bound(cfg)
    if count > cap:
        raise StateSpaceTooLarge(count, cap)
    steps = range(cfg.step_limit + 1) if cfg.step_limit is not None else (0,)
    order = [
        GridState(a, tuple(advs), c, t)
        for a in cfg.cells
        for advs in itertools.product(cfg.floor, repeat=len(cfg.adversaries))
        for c in range(1, cfg.lives + 1)
        for t in steps
    ]
    if cfg.adversaries:
        order.append(DEAD)
    index = {s: i for i, s in enumerate(order)}
    n = len(order) + 1
    reset = n - 1
    dense_entr = {}
    for d in cfg.directions:
        v = np.zeros(n)
        for s, p in entrance_distribution(cfg, d).items():
            v[index[s]] += p
        dense_entr[d] = v
    initial = sum(dense_entr.values()) / len(dense_entr)
    rows: dict[tuple[int, int], list] = {}
    for i, s in enumerate(order):
        for a in range(len(ACTIONS)):
            rows[(i, a)] = [(reset if t is None else index[t], p) for t, p in successors(cfg, s, a).items()]
    for a in range(len(ACTIONS)):
        rows[(reset, a)] = initial
    mdp = Mdp.from_rows(n, len(ACTIONS), rows, initial)
    doors = cfg.doors
    exits = {d: frozenset(i for i, s in enumerate(order) if s.life > 0 and s.agent in doors[d]) for d in cfg.directions}
    bad = frozenset([index[DEAD]]) if cfg.adversaries else frozenset()
    room = Room(cfg.name, mdp, cfg.directions, dense_entr, exits, bad, reset, tuple(order) + (None,))
    room.validate()
    return GridRoom(cfg, room, tuple(order), index)


def build_room(cfg: GridRoomConfig, cap: int = DEFAULT_CAP) -> Room:
    return build_grid_room(cfg, cap).room


# ---------------------------------------------------------------------------
# Reward shaping


def potential(cfg: GridRoomConfig, state: GridState | None, targets: Sequence[Cell], scale: int = 1) -> float:
    """1 - (L1 distance to the nearest target cell) / (scale * (width + height)); 0 at the reset."""
    if state is None or state.life == 0 or not targets:
        return 0.0
    x, y = state.agent
    dist = min(abs(x - tx) + abs(y - ty) for tx, ty in targets)
    return 1.0 - dist / (scale * (cfg.width + cfg.height))


def shaped_reward(
    cfg: GridRoomConfig,
    s: GridState | None,
    a: int,
    s_next: GridState | None,
    gamma: float,
    direction: str,
    r_star: float = 1.0,
    scale: int = 1,
    base_on: str = "source",
) -> float:
    """gamma * Phi(s') - Phi(s) + r* [x in T] - r* [x in B].

    T is the exit of ``direction`` and B the states without life.  The
    base signal is read on ``s`` by default; ``base_on="successor"`` reads
    it on ``s'``, which suits learners that stop at T and B.
    """
    targets = cfg.doors[direction]
    x = s if base_on == "source" else s_next
    base = 0.0
    if x is not None:
        if x.life > 0 and x.agent in targets:
            base += r_star
        if x.life == 0:
            base -= r_star
    return gamma * potential(cfg, s_next, targets, scale) - potential(cfg, s, targets, scale) + base


# ---------------------------------------------------------------------------
# Simulator


class GridSimulator:
    """Sampled stepping with its own RNG; supports power-ups."""

    def __init__(self, cfg: GridRoomConfig, seed: int | np.random.Generator | None = 0):
        cfg.validate()
        self.cfg = cfg
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.state: GridState | None = None

    def reset(self, direction: str | None = None) -> GridState:
        dirs = self.cfg.directions
        d = direction if direction is not None else dirs[int(self.rng.integers(len(dirs)))]
        entries = self.cfg.entry_cells(d)
        agent = entries[int(self.rng.integers(len(entries)))]
        spots = self.cfg.adversary_entry_cells(d, agent)
        advs = tuple(spots[int(self.rng.integers(len(spots)))] for _ in self.cfg.adversaries)
        self.state = GridState(agent, advs, self.cfg.lives)
        return self.state

    def set_state(self, state: GridState | None) -> None:
        self.state = state

    def step(self, action: int) -> GridState | None:
        if self.state is None:
            raise InvalidRoom("simulator is at the reset; call reset() first")
        dist = successors(self.cfg, self.state, action)
        outcomes = list(dist)
        p = np.array([dist[o] for o in outcomes])
        self.state = outcomes[int(self.rng.choice(len(outcomes), p=p / p.sum()))]
        return self.state

    def exit_direction(self) -> str | None:
        s = self.state
        if s is None or s.life == 0:
            return None
        for d, cells in self.cfg.doors.items():
            if s.agent in cells:
                return d
        return None


# ---------------------------------------------------------------------------
# Maps of rooms


def room_layout(
    width: int, height: int, directions: Sequence[str], obstacles: int = 0, seed: int | np.random.Generator = 0
) -> tuple[str, ...]:
    """``width`` x ``height`` floor cells with a door in the middle of each
    requested side and ``obstacles`` random wall cells that keep the room
    connected and leave door and entry cells free."""
    if width < 3 or height < 3:
        raise InvalidRoom("rooms need at least 3x3 cells")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    grid = [["."] * width for _ in range(height)]
    spots = {"N": (width // 2, 0), "S": (width // 2, height - 1), "W": (0, height // 2), "E": (width - 1, height // 2)}
    keep = set()
    for d in directions:
        x, y = spots[d]
        grid[y][x] = d
        keep.add((x, y))
        keep.add(_step((x, y), OPPOSITE[d]))
    free = [(x, y) for y in range(height) for x in range(width) if (x, y) not in keep]
    placed = 0
    for k in rng.permutation(len(free)):
        if placed >= obstacles:
            break
        x, y = free[k]
        grid[y][x] = "#"
        if _connected(grid):
            placed += 1
        else:
            grid[y][x] = "."
    return tuple("".join(r) for r in grid)


def _connected(grid: list[list[str]]) -> bool:
    cells = {(x, y) for y, r in enumerate(grid) for x, c in enumerate(r) if c != "#"}
    if not cells:
        return False
    start = next(iter(cells))
    seen = {start}
    stack = [start]
    while stack:
        c = stack.pop()
        for m in ACTIONS:
            n = _step(c, m)
            if n in cells and n not in seen:
                seen.add(n)
                stack.append(n)
    return seen == cells


@dataclass(frozen=True, eq=False)
class GridMap:
    model: TwoLevelModel
    configs: Mapping[str, GridRoomConfig]
    grid_rooms: Mapping[str, GridRoom]

    def to_json(self) -> dict:
        return {
            "model": self.model.to_json(),
            "configs": {k: c.to_json() for k, c in self.configs.items()},
        }


def grid_map(
    rows: int = 2,
    cols: int = 2,
    room_width: int = 5,
    room_height: int = 5,
    adversaries: int = 1,
    behaviors: Sequence[str] | None = None,
    lives: int = 1,
    obstacles: int = 0,
    entry_radius: int | None = None,
    start: tuple[int, int] = (0, 0),
    target: tuple[int, int] | None = None,
    seed: int = 0,
    cap: int = DEFAULT_CAP,
) -> GridMap:
    """A ``rows`` x ``cols`` map of grid rooms, one room per vertex.

    Vertex ``"r{i}{j}"`` sits at row ``i``, column ``j``; neighbouring rooms
    share a door in the middle of the common side.  The episode starts in
    ``start``, entered from its first neighbour, and aims at ``target``
    (default: the opposite corner).  Adversary behaviors are drawn from
    ``behaviors`` (default: all three) with the seeded generator.
    """
    if rows * cols < 2:
        raise InvalidMap("the map needs at least two rooms")
    rng = np.random.default_rng(seed)
    behaviors = tuple(behaviors) if behaviors else BEHAVIORS
    target = target if target is not None else (rows - 1, cols - 1)
    name = lambda i, j: f"r{i}{j}"  # noqa: E731
    offsets = {"N": (-1, 0), "S": (1, 0), "W": (0, -1), "E": (0, 1)}
    vertices, edges = [], []
    coords: dict[str, tuple[int, int]] = {}
    labels: dict[str, VertexLabel] = {}
    configs: dict[str, GridRoomConfig] = {}
    grid_rooms: dict[str, GridRoom] = {}
    for i in range(rows):
        for j in range(cols):
            v = name(i, j)
            vertices.append(v)
            coords[v] = (i, j)
            dirs = {}
            for d, (di, dj) in offsets.items():
                if 0 <= i + di < rows and 0 <= j + dj < cols:
                    dirs[d] = name(i + di, j + dj)
                    if d in ("S", "E"):
                        edges.append((v, dirs[d]))
            layout = room_layout(room_width, room_height, sorted(dirs), obstacles, rng)
            advs = tuple(behaviors[int(rng.integers(len(behaviors)))] for _ in range(adversaries))
            cfg = GridRoomConfig(layout, advs, lives, name=f"room_{v}", entry_radius=entry_radius)
            configs[v] = cfg
            grid_rooms[cfg.name] = build_grid_room(cfg, cap)
            labels[v] = VertexLabel(cfg.name, dict(sorted(dirs.items())))
    graph = MapGraph.build(vertices, edges)
    v0 = name(*start)
    first = graph.neighbors(v0)[0]
    goal = name(*target)
    towards = min(
        graph.neighbors(v0),
        key=lambda u: abs(coords[u][0] - target[0]) + abs(coords[u][1] - target[1]),
    )
    model = TwoLevelModel(
        graph,
        {g.room.name: g.room for g in grid_rooms.values()},
        labels,
        v0,
        (v0, first),
        (v0, towards),
        frozenset([goal]),
    )
    return GridMap(model, configs, grid_rooms)


def load_grid_config(path: str) -> GridRoomConfig:
    with open(path) as f:
        return GridRoomConfig.from_json(json.load(f))


__all__ = [
    "ACTIONS",
    "BEHAVIORS",
    "DEAD",
    "GridMap",
    "GridRoom",
    "GridRoomConfig",
    "GridSimulator",
    "GridState",
    "adversary_step",
    "agent_move",
    "build_grid_room",
    "build_room",
    "entrance_distribution",
    "grid_map",
    "load_grid_config",
    "potential",
    "room_layout",
    "shaped_reward",
    "state_count_bound",
    "successors",
]
