"""High-level synthesis: MDP plan, succinct MDP, planners and lifted guarantees.

Conventions used throughout:

* A half-edge ``(v, u)`` chosen in room ``v`` means "leave ``v`` towards ``u``".
* Succinct state ``(v, u)`` means "room ``u`` was just entered from ``v``".
  The episode starts in succinct state ``(x, v0)`` where ``d0 = (v0, x)``,
  with the first exit forced to ``d1``.
* Planners are Mealy machines over vertices.  The synthesized ones store
  the committed next vertex as memory: ``alpha(v, q) = (v, q)``.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BsccConditionViolated,
    ImproperPolicy,
    MissingPolicy,
    ModelError,
    NonEpisodicRoom,
    OracleOutOfRange,
    SupportMismatch,
)
from .latent import Embedding, LatentMdp, lift_policy
from .mdp import (
    Mdp,
    Policy,
    ReachAvoidObjective,
    Sampler,
    TIE_TOL,
    ValueVector,
    bottom_components,
    iteration_cap,
    reachable,
    solve_optimal,
    stationary_of_chain,
    value_on_masks,
    value_reach_avoid,
)
from .twolevel import HalfEdge, Room, TwoLevelModel, training_mdp, training_objective_sets, validate

PolicyCatalog = Mapping[tuple[str, str], Policy]
Oracle = Callable[[str, str, str], float]

STAR = 0
ORACLE_TOL = 1e-9


# ---------------------------------------------------------------------------
# Planner


@dataclass(frozen=True, eq=False)
class Planner:
    """Mealy machine: ``alpha[(v, q)]`` is the exit taken in ``v`` with memory ``q``;
    ``update[(v, q, (v, u))]`` is the memory after leaving ``v`` via ``(v, u)``."""

    q0: str
    alpha: Mapping[tuple[str, str], HalfEdge]
    update: Mapping[tuple[str, str, HalfEdge], str]

    @property
    def memory_states(self) -> frozenset[str]:
        return frozenset(q for _, q in self.alpha) | {self.q0}

    def validate(self, h: TwoLevelModel) -> None:
        if self.alpha.get((h.v0, self.q0)) != h.d1:
            raise ModelError(f"planner must start with d1 = {h.d1}")
        for (v, q), d in self.alpha.items():
            if d not in h.graph.out(v):
                raise ModelError(f"alpha({v}, {q}) = {d} is not an outgoing half-edge of {v}")
        if len(self.memory_states) > len(h.graph.vertices):
            raise ModelError("planner uses more memory states than vertices")

    def edge_choices(self, h: TwoLevelModel) -> dict[HalfEdge, HalfEdge]:
        """Exit chosen on entering ``u`` via ``(v, u)``, over configurations reachable from (v0, q0)
        before a target is entered.

        Raises ModelError when two reachable memories disagree on the same
        entry, i.e. the planner is not expressible on the MDP plan.
        """
        choices: dict[HalfEdge, HalfEdge] = {}
        seen = set()
        stack = [(h.v0, self.q0)]
        while stack:
            v, q = stack.pop()
            if (v, q) in seen or v in h.targets:
                continue
            seen.add((v, q))
            d = self.alpha[(v, q)]
            u = d[1]
            if u in h.targets:
                continue
            q2 = self.update[(v, q, d)]
            nxt = self.alpha[(u, q2)]
            if choices.setdefault(d, nxt) != nxt:
                raise ModelError(f"planner makes different choices after {d} depending on memory")
            stack.append((u, q2))
        return choices

    def to_json(self) -> dict:
        return {
            "q0": self.q0,
            "alpha": [[v, q, list(d)] for (v, q), d in sorted(self.alpha.items())],
            "update": [[v, q, list(d), q2] for (v, q, d), q2 in sorted(self.update.items())],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Planner":
        try:
            return cls(
                str(data["q0"]),
                {(str(v), str(q)): (str(d[0]), str(d[1])) for v, q, d in data["alpha"]},
                {(str(v), str(q), (str(d[0]), str(d[1]))): str(q2) for v, q, d, q2 in data["update"]},
            )
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ModelError(f"malformed planner JSON: {exc!r}") from exc


def planner_from_choices(h: TwoLevelModel, choices: Mapping[HalfEdge, HalfEdge]) -> Planner:
    """Vertex-memory planner that, after leaving ``v`` via ``(v, u)``, commits to ``choices[(v, u)]``."""
    g = h.graph
    alpha = {}
    for v in g.vertices:
        ns = g.neighbors(v)
        for q in g.vertices:
            alpha[(v, q)] = (v, q) if q in ns else (v, ns[0])
    update = {}
    for v in g.vertices:
        for d in g.out(v):
            u = d[1]
            t = choices.get(d, (u, g.neighbors(u)[0]))[1]
            for q in g.vertices:
                update[(v, q, d)] = t
    return Planner(h.d1[1], alpha, update)


def memoryless_planner(h: TwoLevelModel, exit_of: Mapping[str, HalfEdge]) -> Planner:
    """Planner whose choice depends on the current vertex only (``exit_of[v0]`` must be d1)."""
    choices = {d: exit_of[d[1]] for d in h.graph.half_edges}
    return planner_from_choices(h, choices)


# ---------------------------------------------------------------------------
# MDP plan


@dataclass(frozen=True, eq=False)
class MdpPlan:
    mdp: Mdp
    h: TwoLevelModel
    states: tuple
    blocks: Mapping[HalfEdge, tuple[int, np.ndarray]]
    reset: int
    bottom: int
    actions: tuple
    exit_mask: np.ndarray
    target: np.ndarray
    bad: np.ndarray
    catalog: PolicyCatalog = field(repr=False)

    def action_of(self, d: HalfEdge) -> int:
        return 1 + self.h.graph.half_edge_index[d]

    def state_index(self, s: int, v: str, u: str) -> int:
        start, pos = self.blocks[(v, u)]
        p = pos[s]
        if p < 0:
            return self.reset
        return start + int(p)

    def block_slice(self, d: HalfEdge) -> slice:
        start, pos = self.blocks[d]
        return slice(start, start + int((pos >= 0).sum()))


def _room_positions(room: Room) -> np.ndarray:
    pos = np.full(room.n_states, -1, dtype=np.int64)
    keep = np.arange(room.n_states) != room.reset
    pos[keep] = np.arange(int(keep.sum()))
    return pos


def check_room_episodic(room: Room, direction: str, policy: Policy) -> None:
    """Raise NonEpisodicRoom unless reset is reachable from every state of the training room."""
    chain = training_mdp(room, direction).chain(policy)
    back = reachable(chain.T.tocsr(), [room.reset])
    if not back.all():
        s = int(np.flatnonzero(~back)[0])
        raise NonEpisodicRoom(
            f"room {room.name}, direction {direction!r}: reset unreachable from state {s} under the catalog policy"
        )


def build_mdp_plan(h: TwoLevelModel, catalog: PolicyCatalog, check_episodic: bool = True) -> MdpPlan:
    """MDP plan with one block of room states per half-edge plus a shared reset and a sink.

    Action 0 is ``*``; action ``1 + i`` is the i-th half-edge.  All actions
    are enabled everywhere; protocol violations lead to the sink.  States
    of target rooms move to the reset, so the plan restarts after success.
    """
    validate(h)
    g = h.graph
    for v in g.vertices:
        for u in g.neighbors(v):
            key = h.key(v, u)
            if key not in catalog:
                raise MissingPolicy(f"no low-level policy for room {key[0]}, direction {key[1]!r}")
    if check_episodic:
        for key in {h.key(v, u) for v, u in g.half_edges}:
            room = h.rooms[key[0]]
            check_room_episodic(room, key[1], catalog[key])

    blocks: dict[HalfEdge, tuple[int, np.ndarray]] = {}
    states: list = []
    positions = {name: _room_positions(r) for name, r in h.rooms.items()}
    for d in g.half_edges:
        room = h.room(d[0])
        blocks[d] = (len(states), positions[room.name])
        states.extend((s, d[0], d[1]) for s in range(room.n_states) if s != room.reset)
    reset = len(states)
    bottom = reset + 1
    states.extend([("reset",), ("bottom",)])
    n = len(states)
    m = 1 + len(g.half_edges)

    def lift(dist: np.ndarray, d: HalfEdge) -> tuple[np.ndarray, np.ndarray]:
        start, pos = blocks[d]
        nz = np.flatnonzero(dist)
        dest = np.where(pos[nz] >= 0, start + pos[nz], reset)
        order = np.argsort(dest, kind="stable")
        dest, pr = dest[order], dist[nz][order]
        uniq, inv = np.unique(dest, return_inverse=True)
        return uniq, np.bincount(inv, weights=pr)

    initial = np.zeros(n)
    ini_dest, ini_prob = lift(h.initial_entrance(), h.d1)
    initial[ini_dest] = ini_prob

    row_dest: list[np.ndarray] = []
    row_prob: list[np.ndarray] = []
    to_bottom = (np.array([bottom]), np.array([1.0]))
    exit_mask = np.zeros(n, dtype=bool)
    target = np.zeros(n, dtype=bool)
    bad = np.zeros(n, dtype=bool)
    bad[reset] = True
    bad[bottom] = True

    to_reset = (np.array([reset]), np.array([1.0]))
    for d in g.half_edges:
        v, u = d
        room = h.room(v)
        start, pos = blocks[d]
        key = h.key(v, u)
        if v in h.targets:
            # episodes end at the goal: every state of a target room restarts
            for s in range(room.n_states):
                if s != room.reset:
                    target[start + pos[s]] = True
                    for _ in range(m):
                        row_dest.append(to_reset[0])
                        row_prob.append(to_reset[1])
            continue
        chain = room.mdp.chain(catalog[key])
        exits = room.exit_mask(key[1])
        bmask = room.bad_mask()
        entry = {}
        for t in g.neighbors(u):
            entry[(u, t)] = lift(h.entrance(u, v), (u, t))
        for s in range(room.n_states):
            if s == room.reset:
                continue
            i = start + pos[s]
            target[i] = v in h.targets
            bad[i] = bool(bmask[s])
            if exits[s]:
                exit_mask[i] = True
                for a in range(m):
                    e = g.half_edges[a - 1] if a > 0 else None
                    r = entry.get(e, to_bottom) if e is not None else to_bottom
                    row_dest.append(r[0])
                    row_prob.append(r[1])
            else:
                lo, hi = chain.indptr[s], chain.indptr[s + 1]
                dist = np.zeros(room.n_states)
                dist[chain.indices[lo:hi]] = chain.data[lo:hi]
                r = lift(dist, d)
                row_dest.append(r[0])
                row_prob.append(r[1])
                for _ in range(1, m):
                    row_dest.append(to_bottom[0])
                    row_prob.append(to_bottom[1])
    ini_nz = np.flatnonzero(initial)
    for _ in range(m):
        row_dest.append(ini_nz)
        row_prob.append(initial[ini_nz])
    for _ in range(m):
        row_dest.append(to_bottom[0])
        row_prob.append(to_bottom[1])

    lengths = np.array([len(r) for r in row_dest], dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(lengths)])
    mdp = Mdp.from_arrays(
        n,
        m,
        np.repeat(np.arange(n), m),
        np.tile(np.arange(m), n),
        indptr,
        np.concatenate(row_dest),
        np.concatenate(row_prob),
        initial,
    )
    actions = ("*",) + g.half_edges
    target &= ~bad
    return MdpPlan(mdp, h, tuple(states), blocks, reset, bottom, actions, exit_mask, target, bad, catalog)


def is_proper(plan: MdpPlan, policy: Policy) -> bool:
    """True iff no non-sink state can reach the sink under ``policy``."""
    chain = plan.mdp.chain(policy)
    back = reachable(chain.T.tocsr(), [plan.bottom])
    return int(back.sum()) == 1


def _plan_actions_from_choices(plan: MdpPlan, choices: Mapping[HalfEdge, HalfEdge]) -> np.ndarray:
    g = plan.h.graph
    actions = np.zeros(plan.mdp.n_states, dtype=np.int64)
    for d in g.half_edges:
        u = d[1]
        nxt = choices.get(d, (u, g.neighbors(u)[0]))
        sl = plan.block_slice(d)
        idx = np.arange(sl.start, sl.stop)
        actions[idx[plan.exit_mask[idx]]] = plan.action_of(nxt)
    return actions


def planner_to_plan_policy(planner: Planner, plan: MdpPlan) -> Policy:
    planner.validate(plan.h)
    choices = planner.edge_choices(plan.h)
    return Policy.from_actions(_plan_actions_from_choices(plan, choices), plan.mdp.n_actions)


def plan_policy_to_planner(policy: Policy, plan: MdpPlan) -> Planner:
    if not policy.deterministic or not is_proper(plan, policy):
        raise ImproperPolicy("only proper deterministic stationary plan policies correspond to planners")
    g = plan.h.graph
    acts = policy.actions
    choices = {}
    for d in g.half_edges:
        sl = plan.block_slice(d)
        idx = np.arange(sl.start, sl.stop)
        picked = set(acts[idx[plan.exit_mask[idx]]].tolist())
        if len(picked) > 1:
            raise ImproperPolicy(f"exit states of {d} choose different next directions")
        if picked:
            choices[d] = plan.actions[picked.pop()]
    return planner_from_choices(plan.h, choices)


def plan_value(plan: MdpPlan, policy: Policy, gamma: float, tol: float = 1e-9) -> float:
    """Reach-avoid value of the plan's initial distribution (1 when v0 is a target)."""
    if plan.h.v0 in plan.h.targets:
        return 1.0
    good = plan.target
    obj = ReachAvoidObjective(np.flatnonzero(good), np.flatnonzero(plan.bad), gamma)
    return value_reach_avoid(plan.mdp, policy, obj, tol).initial_value(plan.mdp.initial)


# ---------------------------------------------------------------------------
# Room value oracles


def room_values(room: Room, policy: Policy, direction: str, gamma: float, tol: float = 1e-9) -> np.ndarray:
    """Values of ``policy`` for exiting via ``direction`` while avoiding bad states and reset."""
    mdp = training_mdp(room, direction)
    good, bad = training_objective_sets(room, direction)
    return value_on_masks(mdp, policy, good, bad, gamma, tol).values


def _entrance_vector(room: Room, entrance) -> np.ndarray:
    if isinstance(entrance, str):
        return np.asarray(room.entrance[entrance])
    return np.asarray(entrance, dtype=np.float64)


def room_value_oracle_exact(
    room: Room,
    latent_policy: Policy,
    phi: Embedding,
    direction: str,
    gamma: float,
    entrance,
    tol: float = 1e-9,
) -> float:
    """Entrance-expected value of the lifted latent policy in the training room.

    ``entrance`` is a local direction name or an explicit distribution.
    """
    w = room_values(room, lift_policy(phi, latent_policy), direction, gamma, tol)
    return float(_entrance_vector(room, entrance) @ w)


def latent_room_values(latent: LatentMdp, latent_policy: Policy, gamma: float, tol: float = 1e-9) -> np.ndarray:
    n = latent.n_states
    good = np.zeros(n, dtype=bool)
    good[list(latent.target)] = True
    bad = np.zeros(n, dtype=bool)
    bad[list(latent.bad)] = True
    return value_on_masks(latent.mdp, latent_policy, good, bad, gamma, tol).values


def room_value_oracle_latent(
    latent: LatentMdp, latent_policy: Policy, gamma: float, latent_entrance: np.ndarray, tol: float = 1e-9
) -> float:
    return float(np.asarray(latent_entrance) @ latent_room_values(latent, latent_policy, gamma, tol))


def ground_oracle(h: TwoLevelModel, catalog: PolicyCatalog, gamma: float, tol: float = 1e-9) -> Oracle:
    """Succinct-model oracle: gamma times the entrance-expected room value (exit step included)."""
    cache: dict[tuple[str, str], np.ndarray] = {}

    def oracle(room_name: str, exit_dir: str, entry_dir: str) -> float:
        key = (room_name, exit_dir)
        if key not in cache:
            if key not in catalog:
                raise MissingPolicy(f"no low-level policy for room {room_name}, direction {exit_dir!r}")
            cache[key] = room_values(h.rooms[room_name], catalog[key], exit_dir, gamma, tol)
        return gamma * float(np.asarray(h.rooms[room_name].entrance[entry_dir]) @ cache[key])

    return oracle


@dataclass(frozen=True, eq=False)
class LatentRoomModel:
    """Latent model and latent policy for one (room, exit direction)."""

    latent: LatentMdp
    policy: Policy
    phi: Embedding


def latent_oracle(
    h: TwoLevelModel,
    models: Mapping[tuple[str, str], LatentRoomModel],
    latent_entrances: Mapping[tuple[str, str], np.ndarray],
    gamma: float,
    tol: float = 1e-9,
) -> Oracle:
    """Oracle evaluating latent policies in their latent models from learned latent entrances.

    Entrances missing from ``latent_entrances`` fall back to the
    pushforward of the true entrance distribution.
    """
    cache: dict[tuple[str, str], np.ndarray] = {}

    def oracle(room_name: str, exit_dir: str, entry_dir: str) -> float:
        key = (room_name, exit_dir)
        if key not in models:
            raise MissingPolicy(f"no latent model for room {room_name}, direction {exit_dir!r}")
        model = models[key]
        if key not in cache:
            cache[key] = latent_room_values(model.latent, model.policy, gamma, tol)
        ent = latent_entrances.get((room_name, entry_dir))
        if ent is None:
            ent = model.phi.push(h.rooms[room_name].entrance[entry_dir])
        return gamma * float(np.asarray(ent) @ cache[key])

    return oracle


# ---------------------------------------------------------------------------
# Succinct MDP


@dataclass(frozen=True, eq=False)
class SuccinctMdp:
    mdp: Mdp
    h: TwoLevelModel
    edges: tuple[HalfEdge, ...]
    bottom: int
    start: int
    first_action: int
    gamma: float
    provenance: Mapping[tuple[int, int], tuple[str, str, str, float]]

    @property
    def contraction(self) -> float:
        """Largest probability of a non-sink transition."""
        m = self.mdp
        live = m.dest != self.bottom
        return float(m.prob[live].max()) if np.any(live) else 0.0

    def valid_actions(self) -> np.ndarray:
        """(state, action) mask of exits that exist in the entered room."""
        out = np.zeros((self.mdp.n_states, self.mdp.n_actions), dtype=bool)
        idx = self.h.graph.half_edge_index
        for i, (_, u) in enumerate(self.edges):
            for e in self.h.graph.out(u):
                out[i, idx[e]] = True
        return out

    def target_mask(self, targets) -> np.ndarray:
        good = np.zeros(self.mdp.n_states, dtype=bool)
        for i, (_, u) in enumerate(self.edges):
            good[i] = u in targets
        return good

    def report(self) -> list[dict]:
        rows = []
        for (i, a), (room, exit_dir, entry_dir, p) in sorted(self.provenance.items()):
            rows.append(
                {
                    "entered": list(self.edges[i]),
                    "exit": list(self.edges[a]),
                    "room": room,
                    "exit_direction": exit_dir,
                    "entry_direction": entry_dir,
                    "probability": p,
                    "to_sink": 1.0 - p,
                }
            )
        return rows


def build_succinct(h: TwoLevelModel, oracle: Oracle, gamma: float) -> SuccinctMdp:
    """Edge-level MDP whose probabilities are entrance-expected discounted room values."""
    validate(h)
    g = h.graph
    edges = g.half_edges
    idx = g.half_edge_index
    n = len(edges) + 1
    bottom = n - 1
    rows = {}
    provenance = {}
    for i, (v, u) in enumerate(edges):
        room = h.room(u)
        entry_dir = h.local_direction(u, v)
        for a, e in enumerate(edges):
            if e[0] != u:
                rows[(i, a)] = [(bottom, 1.0)]
                continue
            exit_dir = h.local_direction(u, e[1])
            p = float(oracle(room.name, exit_dir, entry_dir))
            if not (-ORACLE_TOL <= p <= gamma + ORACLE_TOL):
                raise OracleOutOfRange(
                    f"value {p} for room {room.name} ({entry_dir!r} -> {exit_dir!r}) is outside [0, {gamma}]"
                )
            p = min(max(p, 0.0), gamma)
            provenance[(i, a)] = (room.name, exit_dir, entry_dir, p)
            rows[(i, a)] = [(idx[e], p), (bottom, 1.0 - p)]
    for a in range(len(edges)):
        rows[(bottom, a)] = [(bottom, 1.0)]
    v0, x = h.d0
    start = idx[(x, v0)]
    initial = np.zeros(n)
    initial[start] = 1.0
    mdp = Mdp.from_rows(n, len(edges), rows, initial)
    return SuccinctMdp(mdp, h, edges, bottom, start, idx[h.d1], gamma, provenance)


def _succinct_cap(succinct: SuccinctMdp) -> int:
    c = succinct.contraction
    return iteration_cap(c) if c < 1 else iteration_cap(1 - 1e-12)


def solve_succinct(succinct: SuccinctMdp, targets, tol: float = 1e-9) -> tuple[ValueVector, np.ndarray]:
    """Optimal gamma=1 reach values and, per state, the best valid exit (lowest index on ties)."""
    good = succinct.target_mask(targets)
    bad = np.zeros(succinct.mdp.n_states, dtype=bool)
    bad[succinct.bottom] = True
    vv, _ = solve_optimal(succinct.mdp, good, bad, 1.0, tol, _succinct_cap(succinct))
    m = succinct.mdp
    q = np.full((m.n_states, m.n_actions), -np.inf)
    q[m.pair_state, m.pair_action] = m.matrix @ vv.values
    q[~succinct.valid_actions()] = -np.inf
    best = q.max(axis=1)
    choice = np.argmax(q >= (best - TIE_TOL)[:, None], axis=1)
    return vv, choice


def synthesize_planner(succinct: SuccinctMdp, targets, tol: float = 1e-9) -> tuple[Planner, float]:
    """Optimal vertex-memory planner and its predicted value from the start state under d1."""
    h = succinct.h
    vv, choice = solve_succinct(succinct, targets, tol)
    choices = {d: succinct.edges[int(choice[i])] for i, d in enumerate(succinct.edges)}
    planner = planner_from_choices(h, choices)
    if h.v0 in targets:
        return planner, 1.0
    row = succinct.mdp.row(succinct.start, succinct.first_action)
    return planner, float(row @ vv.values)


def succinct_value(succinct: SuccinctMdp, planner: Planner, targets, tol: float = 1e-9) -> float:
    """Reach value of ``planner`` in the succinct model (first exit forced to d1)."""
    h = succinct.h
    if h.v0 in targets:
        return 1.0
    choices = planner.edge_choices(h)
    idx = h.graph.half_edge_index
    actions = np.zeros(succinct.mdp.n_states, dtype=np.int64)
    for i, (v, u) in enumerate(succinct.edges):
        actions[i] = idx[choices.get((v, u), (u, h.graph.neighbors(u)[0]))]
    policy = Policy.from_actions(actions, succinct.mdp.n_actions)
    good = succinct.target_mask(targets)
    bad = np.zeros(succinct.mdp.n_states, dtype=bool)
    bad[succinct.bottom] = True
    vv = value_on_masks(succinct.mdp, policy, good, bad, 1.0, tol, _succinct_cap(succinct))
    return float(succinct.mdp.row(succinct.start, succinct.first_action) @ vv.values)


# ---------------------------------------------------------------------------
# Lifting per-room guarantees


def plan_stationary(plan: MdpPlan, policy: Policy, tol: float = 1e-12) -> np.ndarray:
    """Stationary distribution of the plan (periodic chains give the time-average)."""
    return stationary_of_chain(plan.mdp.chain(policy), plan.mdp.initial, tol, require_aperiodic=False)


def _entrance_events(plan: MdpPlan, xi: np.ndarray):
    """Yield (mass, entered vertex, room name, entry direction, ground entrance distribution)."""
    h = plan.h
    for d in h.graph.half_edges:
        v, u = d
        sl = plan.block_slice(d)
        mass = float(xi[sl][plan.exit_mask[sl]].sum())
        if mass > 0:
            yield mass, u, h.room(u).name, h.local_direction(u, v), h.entrance(u, v)
    if xi[plan.reset] > 0:
        v0, x = h.d0
        yield float(xi[plan.reset]), v0, h.room(v0).name, h.local_direction(v0, x), h.initial_entrance()


def tv(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def expected_tv(weights, tvs) -> float:
    """Weighted sum of total-variation terms."""
    return float(np.dot(np.asarray(weights, dtype=float), np.asarray(tvs, dtype=float)))


def entrance_loss(
    plan: MdpPlan,
    xi: np.ndarray,
    embeddings: Mapping[str, Embedding],
    latent_entrances: Mapping[tuple[str, str], np.ndarray],
) -> float:
    """Stationary mass of each room entry times TV(pushed true entrance, latent entrance).

    Entries with no learned latent entrance are left out.
    """
    total = 0.0
    for mass, _, room, entry_dir, dist in _entrance_events(plan, xi):
        lat = latent_entrances.get((room, entry_dir))
        if lat is None:
            continue
        total += mass * tv(embeddings[room].push(dist), lat)
    return total


@dataclass(frozen=True)
class LiftedBound:
    bound: float
    kappa: float
    xi_continue_min: float
    xi_reset: float
    weighted_loss: float
    entrance_loss: float
    kappa_mode: str

    @property
    def vacuous(self) -> bool:
        return not (self.bound <= 1.0)

    def to_json(self) -> dict:
        out = {k: (v if not isinstance(v, float) or math.isfinite(v) else str(v)) for k, v in self.__dict__.items()}
        out["vacuous"] = self.vacuous
        return out


def _power_ratio(r: float, exponent: int) -> float:
    if r <= 1.0:
        return 1.0
    logv = exponent * math.log(r)
    return math.exp(logv) if logv < 700 else math.inf


def _room_stationary(mdp: Mdp, policy: Policy, initial: np.ndarray, reset: int) -> np.ndarray:
    chain = mdp.chain(policy).tolil()
    chain[reset, :] = initial
    return stationary_of_chain(chain.tocsr(), initial, 1e-12, require_aperiodic=False)


def lifted_bound(
    plan: MdpPlan,
    policy: Policy,
    entrance_loss_value: float,
    losses: Mapping[tuple[str, str], float],
    gamma: float,
    xi: np.ndarray | None = None,
    training_inits: Mapping[str, np.ndarray] | None = None,
    exact: bool = True,
) -> LiftedBound:
    """Whole-model value-gap bound from per-room transition losses and the entrance loss.

    bound = (L_I + kappa / xi_cont_min * sum_{(R,d)} xi(S_{R,d}) L^{R,d}) / (xi(reset) (1 - gamma)).
    """
    h = plan.h
    if xi is None:
        xi = plan_stationary(plan, policy)
    xi_reset = float(xi[plan.reset])
    chain = plan.mdp.chain(policy)
    to_reset = np.asarray(chain[:, plan.reset].todense()).ravel()

    # per (room, exit direction) masses
    mass: dict[tuple[str, str], float] = {}
    reset_flow: dict[tuple[str, str], float] = {}
    exit_mass: dict[tuple[str, str], float] = {}
    for d in h.graph.half_edges:
        if d[0] in h.targets:
            continue
        key = h.key(*d)
        sl = plan.block_slice(d)
        mass[key] = mass.get(key, 0.0) + float(xi[sl].sum())
        reset_flow[key] = reset_flow.get(key, 0.0) + float(xi[sl] @ to_reset[sl])
        exit_mass[key] = exit_mass.get(key, 0.0) + float(xi[sl][plan.exit_mask[sl]].sum())
    visited = [k for k, w in mass.items() if w > 0]
    worst = max(((reset_flow[k] + exit_mass[k]) / mass[k] for k in visited), default=0.0)
    xi_cont = 1.0 - worst

    weighted = 0.0
    for k in visited:
        if k not in losses:
            raise MissingPolicy(f"no transition loss for room {k[0]}, direction {k[1]!r}")
        weighted += mass[k] * float(losses[k])

    # expected entrance function per room
    mix: dict[str, np.ndarray] = {}
    for m_, u, room, _, dist in _entrance_events(plan, xi):
        if u not in h.targets:
            mix[room] = mix.get(room, 0.0) + m_ * np.asarray(dist)
    self_check_bscc(plan, policy, xi, visited)

    kappa = 1.0
    mode = "entrance-ratio"
    for room_name, m_ in mix.items():
        room = h.rooms[room_name]
        ipi = m_ / m_.sum()
        init = np.asarray(training_inits[room_name]) if training_inits else room.mdp.initial
        if np.array_equal(ipi > 0, init > 0):
            supp = init > 0
            ratio = np.maximum(ipi[supp] / init[supp], init[supp] / ipi[supp]).max()
            kappa = max(kappa, _power_ratio(float(ratio), room.n_states))
            continue
        if not exact:
            raise SupportMismatch(f"room {room_name}: training and synthesis entrance supports differ")
        mode = "stationary-ratio"
        for k in visited:
            if k[0] != room_name:
                continue
            tm = training_mdp(room, k[1])
            pol = plan.catalog[k]
            base = _room_stationary(tm, pol, init, room.reset)
            shifted = _room_stationary(tm, pol, ipi, room.reset)
            if np.any((shifted > 0) & (base <= 0)):
                raise SupportMismatch(
                    f"room {room_name}, direction {k[1]!r}: synthesis-time stationary support leaves the training one"
                )
            supp = base > 0
            kappa = max(kappa, float((shifted[supp] / base[supp]).max()))

    if xi_reset <= 0 or xi_cont <= 0:
        bound = math.inf
    else:
        room_term = 0.0 if weighted == 0 else kappa / xi_cont * weighted
        bound = (entrance_loss_value + room_term) / (xi_reset * (1 - gamma))
    return LiftedBound(bound, kappa, xi_cont, xi_reset, weighted, entrance_loss_value, mode)


def self_check_bscc(plan: MdpPlan, policy: Policy, xi: np.ndarray, visited) -> None:
    """Raise BsccConditionViolated unless each visited block projects into its training room's bottom component."""
    h = plan.h
    support = xi > 0
    for key in visited:
        room = h.rooms[key[0]]
        tm = training_mdp(room, key[1])
        chain = tm.chain(plan.catalog[key])
        reach = reachable(chain, np.flatnonzero(tm.initial > 0))
        comps = [c for c in bottom_components(chain) if reach[c[0]]]
        if len(comps) != 1:
            raise BsccConditionViolated(f"training room {key} has {len(comps)} reachable bottom components")
        inside = np.zeros(room.n_states, dtype=bool)
        inside[list(comps[0])] = True
        for d in h.graph.half_edges:
            if h.key(*d) != key or d[0] in h.targets:
                continue
            start, pos = plan.blocks[d]
            sl = plan.block_slice(d)
            room_states = np.flatnonzero(pos >= 0)
            used = room_states[support[sl]]
            if np.any(~inside[used]):
                s = int(used[~inside[used]][0])
                raise BsccConditionViolated(
                    f"room state {s} of {key} is recurrent in the plan but not in the training room"
                )


# ---------------------------------------------------------------------------
# Controller execution


@dataclass(frozen=True, eq=False)
class TwoLevelController:
    planner: Planner | None
    policies: PolicyCatalog

    @classmethod
    def from_latent(
        cls,
        planner: Planner | None,
        latent_policies: Mapping[tuple[str, str], Policy],
        embeddings: Mapping[str, Embedding],
    ) -> "TwoLevelController":
        return cls(planner, {k: lift_policy(embeddings[k[0]], p) for k, p in latent_policies.items()})


@dataclass(frozen=True)
class RolloutStats:
    success: np.ndarray
    discounted: np.ndarray
    steps: np.ndarray
    visits: Mapping[str, int]

    @property
    def success_rate(self) -> float:
        return float(self.success.mean())

    @property
    def mean_discounted(self) -> float:
        return float(self.discounted.mean())

    def stderr(self, which: str = "discounted") -> float:
        x = self.discounted if which == "discounted" else self.success.astype(float)
        return float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0


def execute_controller(
    h: TwoLevelModel,
    ctrl: TwoLevelController,
    seed: int,
    episodes: int,
    horizon: int,
    gamma: float,
) -> RolloutStats:
    """Roll out the controller in the stitched model.

    Low-level control stays with the policy of the committed exit until
    one of its exit states is reached; the planner is stepped at each room
    change.  An episode succeeds when it enters a target vertex; it fails on
    a bad state, a reset or the horizon.  With ``ctrl.planner`` set to None
    the next exit is drawn uniformly at every room entry.
    """
    validate(h)
    rng = np.random.default_rng(seed)
    samplers = {name: Sampler(room.mdp, rng) for name, room in h.rooms.items()}
    cums = {k: np.cumsum(p.probs, axis=1) for k, p in ctrl.policies.items()}
    exit_sets = {k: h.rooms[k[0]].exit_mask(k[1]) for k in ctrl.policies}
    bad_sets = {name: room.bad_mask() for name, room in h.rooms.items()}
    entr_cum = {}
    planner = ctrl.planner
    success = np.zeros(episodes, dtype=bool)
    disc = np.zeros(episodes)
    steps = np.zeros(episodes, dtype=np.int64)
    visits = {v: 0 for v in h.graph.vertices}

    def enter(u: str, v: str, sampler: Sampler) -> int:
        key = (u, v)
        if key not in entr_cum:
            entr_cum[key] = np.cumsum(h.entrance(u, v))
        c = entr_cum[key]
        return min(int(np.searchsorted(c, sampler.uniform() * c[-1], side="right")), len(c) - 1)

    def choose(u: str, q, sampler: Sampler):
        if planner is None:
            ns = h.graph.neighbors(u)
            return (u, ns[min(int(sampler.uniform() * len(ns)), len(ns) - 1)]), None
        return planner.alpha[(u, q)], q

    for ep in range(episodes):
        v = h.v0
        sampler = samplers[h.room(v).name]
        s = enter(v, h.d0[1], sampler)
        d, q = h.d1, (planner.q0 if planner else None)
        visits[v] += 1
        t = 0
        while True:
            room = h.room(v)
            if s == room.reset or bad_sets[room.name][s]:
                break
            if v in h.targets:
                success[ep] = True
                disc[ep] = gamma**t
                break
            if t >= horizon:
                break
            key = (room.name, h.local_direction(*d))
            sampler = samplers[room.name]
            t += 1
            if exit_sets[key][s]:
                u = d[1]
                q2 = planner.update[(v, q, d)] if planner else None
                s = enter(u, v, sampler)
                v = u
                visits[v] += 1
                d, q = choose(v, q2, sampler)
                continue
            row = cums[key][s]
            a = min(int(np.searchsorted(row, sampler.uniform() * row[-1], side="right")), len(row) - 1)
            s = sampler.next_state(s, a)
        steps[ep] = t
    return RolloutStats(success, disc, steps, visits)
