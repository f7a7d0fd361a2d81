"""Seeded random instances for property tests and experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .latent import Embedding, LatentMdp, transition_loss_exact
from .mdp import Mdp, Policy, stationary_of_chain
from .twolevel import MapGraph, Room, TwoLevelModel, VertexLabel, training_mdp, training_objective_sets

Rng = np.random.Generator


def _rng(seed) -> Rng:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def random_distribution(rng: Rng, n: int, support: int | None = None, allowed=None) -> np.ndarray:
    """Random distribution over ``n`` items with at most ``support`` nonzeros drawn from ``allowed``."""
    pool = np.arange(n) if allowed is None else np.asarray(allowed)
    k = len(pool) if support is None else max(1, min(support, len(pool)))
    idx = rng.choice(pool, size=k, replace=False)
    out = np.zeros(n)
    out[idx] = rng.dirichlet(np.ones(k))
    return out


def random_mdp(seed, n_states: int, n_actions: int, branching: int = 3, all_enabled: bool = True) -> Mdp:
    """Random MDP with sparse rows; every action is enabled unless ``all_enabled`` is false."""
    rng = _rng(seed)
    rows = {}
    for s in range(n_states):
        acts = range(n_actions) if all_enabled else rng.choice(
            n_actions, size=rng.integers(1, n_actions + 1), replace=False
        )
        for a in acts:
            rows[(s, int(a))] = random_distribution(rng, n_states, branching)
    return Mdp.from_rows(n_states, n_actions, rows, random_distribution(rng, n_states, 2))


def random_episodic_mdp(
    seed, n_states: int, n_actions: int, reset: int = 0, reset_mass: float = 0.1, branching: int = 3
) -> Mdp:
    """Random MDP whose every row sends at least ``reset_mass`` to ``reset``; reset rows equal the initial."""
    rng = _rng(seed)
    others = [s for s in range(n_states) if s != reset]
    initial = random_distribution(rng, n_states, 2, others or None)
    rows = {}
    for s in range(n_states):
        for a in range(n_actions):
            if s == reset:
                rows[(s, a)] = initial
                continue
            r = random_distribution(rng, n_states, branching)
            p = reset_mass + (1 - reset_mass) * rng.uniform(0, 0.3)
            r = (1 - p) * r
            r[reset] += p
            rows[(s, a)] = r
    return Mdp.from_rows(n_states, n_actions, rows, initial)


@dataclass(frozen=True, eq=False)
class AbstractionInstance:
    ground: Mdp
    reset: int
    target: frozenset[int]
    bad: frozenset[int]
    phi: Embedding
    latent: LatentMdp
    latent_policy: Policy


def random_abstraction(
    seed,
    max_ground: int = 20,
    max_latent: int = 6,
    n_actions: int = 2,
    noise: float = 0.3,
    reset_mass: float | None = None,
) -> AbstractionInstance:
    """Episodic ground MDP, label-preserving embedding and a perturbed quotient latent MDP.

    The latent rows are the xi-free average of pushed-forward ground rows
    of each class, mixed with random rows by weight ``noise``.
    """
    rng = _rng(seed)
    k = int(rng.integers(4, max_latent + 1))
    n = int(rng.integers(k + 2, max(k + 2, max_ground) + 1))
    # class 0 holds only the reset (state 0); class 1 targets, class 2 bad states
    n_t = int(rng.integers(1, 3))
    n_b = int(rng.integers(1, 3))
    rest = n - 1 - n_t - n_b
    ordinary = np.concatenate([np.arange(3, k), rng.integers(3, k, size=rest - (k - 3))])
    body = np.concatenate([np.ones(n_t, dtype=np.int64), np.full(n_b, 2), ordinary])
    classes = np.concatenate([[0], rng.permutation(body)]).astype(np.int64)
    reset = 0
    phi = Embedding(classes, k)
    if reset_mass is None:
        reset_mass = rng.uniform(0.05, 0.3)
    ground = random_episodic_mdp(rng, n, n_actions, reset=reset, reset_mass=reset_mass)
    target = frozenset(np.flatnonzero(classes == 1).tolist())
    bad = frozenset(np.flatnonzero(classes == 2).tolist())
    pushed = (ground.matrix @ phi.matrix).toarray()
    rows = {}
    latent_initial = None
    for c in range(k):
        members = np.flatnonzero(classes == c)
        for a in range(n_actions):
            ids = ground.pair_id[members, a]
            row = pushed[ids].mean(axis=0)
            row = (1 - noise) * row + noise * random_distribution(rng, k, 2)
            if c == 0:
                if latent_initial is None:
                    latent_initial = (1 - noise) * phi.push(ground.initial) + noise * random_distribution(rng, k, 2, np.arange(1, k))
                row = latent_initial
            rows[(c, a)] = row
    latent = LatentMdp(
        Mdp.from_rows(k, n_actions, rows, latent_initial), 0, frozenset([1]), frozenset([2])
    )
    pol = Policy.from_probs(rng.dirichlet(np.ones(n_actions), size=k))
    return AbstractionInstance(ground, reset, target, bad, phi, latent, pol)


def random_room(
    seed,
    name: str,
    directions: tuple[str, ...],
    n_states: int,
    n_actions: int = 2,
    reset_mass: float = 0.05,
    n_bad: int = 1,
    branching: int = 3,
    entrance_support: int = 2,
) -> Room:
    """Random episodic room.  State ``n_states - 1`` is the reset; the training
    initial is the uniform mixture of the direction entrances."""
    rng = _rng(seed)
    reset = n_states - 1
    body = rng.permutation(n_states - 1)
    cursor = 0
    exits = {}
    for d in directions:
        k = int(rng.integers(1, 3))
        exits[d] = frozenset(int(s) for s in body[cursor: cursor + k])
        cursor += k
    bad = frozenset(int(s) for s in body[cursor: cursor + n_bad])
    cursor += n_bad
    inner = body[cursor:] if cursor < len(body) else body
    entrance = {d: random_distribution(rng, n_states, entrance_support, inner) for d in directions}
    initial = sum(entrance.values()) / len(directions)
    rows = {}
    for s in range(n_states):
        for a in range(n_actions):
            if s == reset or s in bad:
                rows[(s, a)] = initial if s == reset else _dirac(n_states, reset)
                continue
            r = random_distribution(rng, n_states, branching, np.arange(n_states - 1))
            p = reset_mass + rng.uniform(0, 0.1)
            r = (1 - p) * r
            r[reset] += p
            rows[(s, a)] = r
    mdp = Mdp.from_rows(n_states, n_actions, rows, initial)
    return Room(name, mdp, tuple(directions), entrance, exits, bad, reset)


def _dirac(n: int, s: int) -> np.ndarray:
    out = np.zeros(n)
    out[s] = 1.0
    return out


def random_graph(seed, n_vertices: int, extra_edges: int = 1) -> MapGraph:
    rng = _rng(seed)
    verts = [f"v{i}" for i in range(n_vertices)]
    edges = set()
    for i in range(1, n_vertices):
        j = int(rng.integers(0, i))
        edges.add((verts[j], verts[i]))
    for _ in range(extra_edges):
        a, b = rng.choice(n_vertices, size=2, replace=False)
        e = tuple(sorted((verts[a], verts[b])))
        edges.add(e)
    return MapGraph.build(verts, edges)


def random_two_level_model(
    seed, max_vertices: int = 4, max_room_states: int = 25, n_actions: int = 2, share_rooms: bool = True
) -> TwoLevelModel:
    """Random connected map with random rooms; vertices of equal degree may share a room."""
    rng = _rng(seed)
    nv = int(rng.integers(2, max_vertices + 1))
    g = random_graph(rng, nv, int(rng.integers(0, 2)))
    rooms = {}
    labeling = {}
    by_degree: dict[int, str] = {}
    for v in g.vertices:
        ns = g.neighbors(v)
        dirs = tuple(f"d{i}" for i in range(len(ns)))
        if share_rooms and len(ns) in by_degree and rng.random() < 0.5:
            name = by_degree[len(ns)]
        else:
            name = f"room_{v}"
            size = int(rng.integers(2 * len(ns) + 3, max_room_states + 1))
            rooms[name] = random_room(rng, name, dirs, size, n_actions)
            by_degree.setdefault(len(ns), name)
        perm = rng.permutation(len(ns))
        labeling[v] = VertexLabel(name, {dirs[i]: ns[perm[i]] for i in range(len(ns))})
    v0 = g.vertices[0]
    out0 = g.out(v0)
    d0 = out0[int(rng.integers(len(out0)))]
    d1 = out0[int(rng.integers(len(out0)))]
    others = [v for v in g.vertices if v != v0]
    targets = frozenset([others[int(rng.integers(len(others)))]])
    return TwoLevelModel(g, rooms, labeling, v0, d0, d1, targets)


def random_catalog(seed, h: TwoLevelModel, deterministic: bool = False) -> dict[tuple[str, str], Policy]:
    """Random stationary policies for every (room, direction) pair."""
    rng = _rng(seed)
    out = {}
    for name in sorted(h.rooms):
        room = h.rooms[name]
        for d in room.directions:
            m = room.mdp
            if deterministic:
                out[(name, d)] = Policy.from_actions(rng.integers(0, m.n_actions, size=m.n_states), m.n_actions)
            else:
                out[(name, d)] = Policy.from_probs(rng.dirichlet(np.ones(m.n_actions), size=m.n_states))
    return out


# ---------------------------------------------------------------------------
# Hand-built and two-room instances


def chain_room(name: str, directions: tuple[str, ...], moves: dict[str, dict[str, float]]) -> Room:
    """Single-action room with one entry state per direction.

    ``moves[entry_dir]`` maps exit directions to the probability of
    reaching that exit in one step from the entry state.
    """
    k = len(directions)
    n = 2 * k + 1
    reset = n - 1
    entry = {d: i for i, d in enumerate(directions)}
    exit_state = {d: k + i for i, d in enumerate(directions)}
    entrance = {d: _dirac(n, entry[d]) for d in directions}
    initial = sum(entrance.values()) / k
    rows = {(reset, 0): initial}
    for d in directions:
        row = np.zeros(n)
        for e, p in moves[d].items():
            row[exit_state[e]] += p
        rows[(entry[d], 0)] = row
        rows[(exit_state[d], 0)] = _dirac(n, reset)
    mdp = Mdp.from_rows(n, 1, rows, initial)
    exits = {d: frozenset([exit_state[d]]) for d in directions}
    return Room(name, mdp, directions, entrance, exits, frozenset(), reset)


def memory_instance(p: float = 0.9) -> TwoLevelModel:
    """Map where the best exit of the hub depends on where the hub was entered from.

    Vertices ``s`` (start), ``h`` (hub), ``o`` and ``g`` (target); edges
    s-h, h-o, h-g.  Entered from ``s``, the hub leads to ``o`` with
    probability ``p`` and to ``g`` otherwise; entered from ``o`` the odds
    are swapped.  Rooms have a single action so all policies coincide.
    """
    g = MapGraph.build(["s", "h", "o", "g"], [("s", "h"), ("h", "o"), ("h", "g")])
    hub = chain_room(
        "hub",
        ("to_s", "to_o", "to_g"),
        {"to_s": {"to_o": p, "to_g": 1 - p}, "to_o": {"to_g": p, "to_o": 1 - p}, "to_g": {"to_s": 1.0}},
    )
    leaf = chain_room("leaf", ("out",), {"out": {"out": 1.0}})
    labeling = {
        "s": VertexLabel("leaf", {"out": "h"}),
        "o": VertexLabel("leaf", {"out": "h"}),
        "g": VertexLabel("leaf", {"out": "h"}),
        "h": VertexLabel("hub", {"to_s": "s", "to_o": "o", "to_g": "g"}),
    }
    return TwoLevelModel(g, {"hub": hub, "leaf": leaf}, labeling, "s", ("s", "h"), ("s", "h"), frozenset(["g"]))


def perturb_training_latent(seed, room: Room, direction: str, noise: float) -> LatentMdp:
    """Latent copy of a room's training MDP with every non-reset row mixed with noise."""
    rng = _rng(seed)
    tm = training_mdp(room, direction)
    rows = {}
    for s in range(tm.n_states):
        for a in tm.actions_at(s):
            r = tm.row(s, a)
            if s != room.reset and noise > 0:
                r = (1 - noise) * r + noise * random_distribution(rng, tm.n_states, 2)
            rows[(s, int(a))] = r
    good, bad = training_objective_sets(room, direction)
    return LatentMdp(
        Mdp.from_rows(tm.n_states, tm.n_actions, rows, tm.initial),
        room.reset,
        frozenset(np.flatnonzero(good).tolist()),
        frozenset(np.flatnonzero(bad).tolist()),
    )


@dataclass(frozen=True, eq=False)
class LiftedInstance:
    """Two-room model with perturbed identity-embedded latent models and exact losses."""

    model: TwoLevelModel
    catalog: dict
    latent_models: dict
    latent_entrances: dict
    losses: dict
    embeddings: dict
    noise: float


def random_lifted_instance(seed, gamma: float = 0.9) -> LiftedInstance:
    """Map a-b with one random room per vertex and target b.

    Latent models perturb each training MDP by a noise level drawn
    log-uniformly from [1e-4, 1e-1]; per-room losses are exact, taken under
    the stationary distribution of the training MDP.
    """
    from .synthesis import LatentRoomModel

    rng = _rng(seed)
    g = MapGraph.build(["a", "b"], [("a", "b")])
    ra = random_room(rng, "A", ("x",), int(rng.integers(5, 15)), reset_mass=0.02)
    rb = random_room(rng, "B", ("x",), int(rng.integers(5, 15)), reset_mass=0.02)
    lab = {"a": VertexLabel("A", {"x": "b"}), "b": VertexLabel("B", {"x": "a"})}
    h = TwoLevelModel(g, {"A": ra, "B": rb}, lab, "a", ("a", "b"), ("a", "b"), frozenset(["b"]))
    catalog = random_catalog(rng, h)
    noise = float(10 ** rng.uniform(-4, -1))
    embeddings = {n: Embedding.identity(r.n_states) for n, r in h.rooms.items()}
    models, losses = {}, {}
    for (name, d), pol in catalog.items():
        room = h.rooms[name]
        lat = perturb_training_latent(rng, room, d, noise)
        models[(name, d)] = LatentRoomModel(lat, pol, embeddings[name])
        tm = training_mdp(room, d)
        xi = stationary_of_chain(tm.chain(pol), tm.initial, require_aperiodic=False)
        losses[(name, d)] = transition_loss_exact(tm, lat, embeddings[name], pol, xi)
    entrances = {}
    for name, room in h.rooms.items():
        for d in room.directions:
            e = np.asarray(room.entrance[d])
            entrances[(name, d)] = (1 - noise) * e + noise * random_distribution(
                rng, room.n_states, 2, np.flatnonzero(e)
            )
    return LiftedInstance(h, catalog, models, entrances, losses, embeddings, noise)


def calibration_instance(slip: float = 0.05, latent_slip: float = 0.08) -> AbstractionInstance:
    """Corridor reset -> 1 -> 2 -> 3 -> 4 -> target -> reset with a bad side state.

    From state 3 the ground slips to the bad state with probability
    ``slip``; the latent model uses ``latent_slip`` instead.  The embedding
    is the identity and there is a single action.
    """
    n = 7
    target, bad = 5, 6
    nxt = {0: 1, 1: 2, 2: 3, 3: 4, 4: target, target: 0, bad: 0}

    def rows_for(p: float) -> dict:
        rows = {}
        for s, t in nxt.items():
            r = _dirac(n, t)
            if s == 3:
                r = (1 - p) * r
                r[bad] += p
            rows[(s, 0)] = r
        return rows

    initial = _dirac(n, 1)
    ground = Mdp.from_rows(n, 1, rows_for(slip), initial)
    latent = LatentMdp(Mdp.from_rows(n, 1, rows_for(latent_slip), initial), 0, frozenset([target]), frozenset([bad]))
    pol = Policy.from_actions(np.zeros(n, dtype=np.int64), 1)
    return AbstractionInstance(ground, 0, frozenset([target]), frozenset([bad]), Embedding.identity(n), latent, pol)
