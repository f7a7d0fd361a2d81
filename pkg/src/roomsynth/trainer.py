"""Tabular training of per-(room, direction) latent policies and models.

Q-learning runs over latent states on the training room of a direction:
reaching an exit of that direction, a bad state or the reset ends an
episode, and the simulation restarts from the training initial
distribution.  The whole transition stream, restarts included, is kept
to fit the count-based latent model.  The frozen greedy policy is then
certified on a fresh trajectory.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ModelError, NoExplorationCoverage
from .gridworld import GridRoom, potential
from .latent import (
    REPORT_SCHEMA,
    Embedding,
    LatentMdp,
    PacReport,
    TrajectorySource,
    certify_online,
    empirical_latent_mdp,
    lift_policy,
)
from .mdp import Policy, Sampler, _draw
from .synthesis import latent_room_values
from .twolevel import Room, TwoLevelModel, training_mdp, training_objective_sets

ARTIFACT_SCHEMA = REPORT_SCHEMA


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    ``alpha=None`` selects the 1/(1 + visits) step size.  Exploration is
    epsilon-greedy, decaying linearly from ``eps_start`` to ``eps_end``
    over the first ``eps_fraction`` of the steps, or Boltzmann with a fixed
    ``temperature``.
    """

    steps: int = 200_000
    episode_cap: int = 500
    alpha: float | None = None
    exploration: str = "epsilon"
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_fraction: float = 0.5
    temperature: float = 0.1
    gamma: float = 0.99
    model_every: int = 50_000
    log_every: int = 10_000
    smoothing: float = 0.0
    r_star: float = 1.0
    shaping: bool = True
    epsilon: float = 0.05
    delta: float = 0.05
    cert_cap: int = 200_000
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1 or self.episode_cap < 1:
            raise ModelError("steps and episode_cap must be positive")
        if self.alpha is not None and not (0 < self.alpha <= 1):
            raise ModelError("alpha must lie in (0, 1]")
        if not (0 < self.gamma < 1):
            raise ModelError("gamma must lie in (0, 1)")
        if self.exploration not in ("epsilon", "boltzmann"):
            raise ModelError(f"unknown exploration {self.exploration!r}")
        if not (0 <= self.eps_end <= self.eps_start <= 1):
            raise ModelError("the epsilon schedule must decay within [0, 1]")
        if not (0 < self.eps_fraction <= 1) or self.temperature <= 0:
            raise ModelError("eps_fraction must lie in (0, 1] and temperature be positive")
        if self.model_every < 1 or self.log_every < 1:
            raise ModelError("model_every and log_every must be positive")

    def epsilon_at(self, step: int) -> float:
        frac = min(step / (self.eps_fraction * self.steps), 1.0)
        return self.eps_start + frac * (self.eps_end - self.eps_start)

    @classmethod
    def from_json(cls, data: Mapping) -> "TrainConfig":
        known = cls.__dataclass_fields__
        unknown = set(data) - set(known)
        if unknown:
            raise ModelError(f"unknown training options {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# Embeddings


def default_embedding(room: Room | GridRoom, k: int = 1) -> Embedding:
    """Coarsened grid embedding, refined so labels are constant per class.

    Agent cells are divided by ``k`` per axis and adversary cells by
    ``2k``; life and step counters are kept.  Classes are then split by
    (exit direction, bad, reset).  ``k=1`` and plain rooms give the
    identity.
    """
    if k < 1:
        raise ModelError("the coarsening factor must be at least 1")
    room_obj = room.room if isinstance(room, GridRoom) else room
    n = room_obj.n_states
    if k == 1 or not isinstance(room, GridRoom):
        return Embedding.identity(n)
    exit_dir = room_obj.exit_direction
    bad = room_obj.bad_mask()
    keys = []
    for i in range(n):
        s = room.decode(i)
        label = (int(exit_dir[i]), bool(bad[i]), i == room_obj.reset)
        if s is None or s.life == 0:
            keys.append(("special", label))
            continue
        ax, ay = s.agent
        advs = tuple((x // (2 * k), y // (2 * k)) for x, y in s.adversaries)
        keys.append(((ax // k, ay // k), advs, s.life, s.step, label))
    ids: dict = {}
    classes = np.array([ids.setdefault(key, len(ids)) for key in keys], dtype=np.int64)
    return Embedding(classes, len(ids))


# ---------------------------------------------------------------------------
# Artifacts


@dataclass(eq=False)
class TrainedRoomArtifact:
    room: str
    direction: str
    phi: Embedding
    latent: LatentMdp
    latent_policy: Policy
    q: np.ndarray
    report: PacReport
    latent_value: float
    curves: list[dict] = field(default_factory=list)
    config: TrainConfig = field(default_factory=TrainConfig)

    @property
    def key(self) -> tuple[str, str]:
        return (self.room, self.direction)

    def ground_policy(self) -> Policy:
        return lift_policy(self.phi, self.latent_policy)

    def check(self) -> None:
        r = self.report
        if r is None:
            raise ModelError(f"artifact {self.key} carries no certificate")
        if not math.isclose(r.gamma, self.config.gamma) or not math.isclose(r.epsilon, self.config.epsilon):
            raise ModelError(f"artifact {self.key}: certificate parameters differ from the training config")
        if r.samples < 1 or not (0 <= r.L_hat <= 1) or not (0 <= r.xi_hat <= 1):
            raise ModelError(f"artifact {self.key}: certificate estimates out of range")

    def to_json(self) -> dict:
        return {
            "schema": ARTIFACT_SCHEMA,
            "room": self.room,
            "direction": self.direction,
            "phi": self.phi.to_json(),
            "latent": self.latent.to_json(),
            "latent_policy": self.latent_policy.probs.tolist(),
            "q": self.q.tolist(),
            "report": self.report.to_json(),
            "latent_value": self.latent_value,
            "curves": self.curves,
            "config": asdict(self.config),
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "TrainedRoomArtifact":
        _check_schema(data.get("schema"), "trained room artifact")
        art = cls(
            room=str(data["room"]),
            direction=str(data["direction"]),
            phi=Embedding.from_json(data["phi"]),
            latent=LatentMdp.from_json(data["latent"]),
            latent_policy=Policy.from_probs(np.asarray(data["latent_policy"], dtype=np.float64)),
            q=np.asarray(data["q"], dtype=np.float64),
            report=PacReport.from_json(data["report"]),
            latent_value=float(data["latent_value"]),
            curves=list(data.get("curves", [])),
            config=TrainConfig(**data.get("config", {})),
        )
        art.check()
        return art

    def write_curves(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["step", "success_rate", "failure_rate", "latent_value"])
            w.writeheader()
            for row in self.curves:
                w.writerow(row)


def _check_schema(version, what: str) -> None:
    if version is None or str(version).split(".")[0] != ARTIFACT_SCHEMA.split(".")[0]:
        raise ModelError(f"unsupported {what} schema version {version!r}")


# ---------------------------------------------------------------------------
# Training


def _greedy(q: np.ndarray, visits: np.ndarray) -> np.ndarray:
    """Argmax over the actions tried in each state (all actions where none was)."""
    tried = visits > 0
    masked = np.where(tried | ~tried.any(axis=1, keepdims=True), q, -np.inf)
    return np.argmax(masked, axis=1)


def _potential_vector(room: Room | GridRoom, direction: str) -> np.ndarray:
    if not isinstance(room, GridRoom):
        return np.zeros(room.n_states)
    targets = room.config.doors[direction]
    return np.array([potential(room.config, room.decode(i), targets) for i in range(room.room.n_states)])


def train_room_policy(
    room: Room | GridRoom,
    direction: str,
    phi: Embedding | None = None,
    cfg: TrainConfig | None = None,
) -> TrainedRoomArtifact:
    """Q-learning over latent states on the training room of ``direction``.

    Rewards are r* on entering an exit of ``direction``, -r* on entering a
    bad state, plus potential shaping for grid rooms (zero potential at
    episode ends).  The greedy policy only picks actions tried in a state.
    Raises NoExplorationCoverage when, without smoothing, some latent entry
    state was never acted in.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    grid = room if isinstance(room, GridRoom) else None
    room = grid.room if grid else room
    if direction not in room.directions:
        raise ModelError(f"room {room.name} has no direction {direction!r}")
    phi = phi or Embedding.identity(room.n_states)
    if phi.n_ground != room.n_states:
        raise ModelError("embedding does not match the room")
    mdp = training_mdp(room, direction)
    good, bad = training_objective_sets(room, direction)
    stop = good | bad
    n_act = mdp.n_actions
    base = np.where(good, cfg.r_star, 0.0) - np.where(bad & (np.arange(room.n_states) != room.reset), cfg.r_star, 0.0)
    pot = _potential_vector(grid, direction) if (grid and cfg.shaping) else np.zeros(room.n_states)
    pot_next = np.where(stop, 0.0, pot)
    reward_to = cfg.gamma * pot_next + base

    rng = np.random.default_rng(cfg.seed)
    sampler = Sampler(mdp, rng)
    classes = phi.classes
    q = np.zeros((phi.n_latent, n_act))
    visits = np.zeros((phi.n_latent, n_act), dtype=np.int64)
    transitions = np.empty((cfg.steps, 3), dtype=np.int64)
    curves: list[dict] = []
    win_succ = win_fail = win_eps = 0
    latent = None

    s = sampler.initial_state()
    ep_len = 0
    for t in range(cfg.steps):
        ls = classes[s]
        if stop[s]:
            a = 0
        elif cfg.exploration == "epsilon":
            if rng.random() < cfg.epsilon_at(t):
                a = int(rng.integers(n_act))
            else:
                a = int(np.argmax(q[ls]))
        else:
            z = q[ls] / cfg.temperature
            p = np.exp(z - z.max())
            a = _draw(p / p.sum(), rng.random())
        s2 = sampler.next_state(s, a)
        transitions[t] = (s, a, s2)
        if not stop[s]:
            ls2 = classes[s2]
            visits[ls, a] += 1
            lr = cfg.alpha if cfg.alpha is not None else 1.0 / (1.0 + visits[ls, a])
            r = reward_to[s2] - pot[s]
            target = r if stop[s2] else r + cfg.gamma * q[ls2].max()
            q[ls, a] += lr * (target - q[ls, a])
            ep_len += 1
            if stop[s2]:
                win_eps += 1
                win_succ += int(good[s2])
                win_fail += int(bad[s2] and s2 != room.reset)
                ep_len = 0
            elif ep_len >= cfg.episode_cap:
                # truncate: restart without recording a transition
                win_eps += 1
                ep_len = 0
                s2 = sampler.initial_state()
        s = s2
        done = t + 1
        if done % cfg.model_every == 0 or done == cfg.steps:
            latent = _fit_latent(transitions[:done], phi, room, good, bad, n_act, cfg.smoothing)
        if done % cfg.log_every == 0 or done == cfg.steps:
            lv = _latent_value(latent, _greedy(q, visits), cfg.gamma) if latent is not None else None
            curves.append(
                {
                    "step": done,
                    "success_rate": win_succ / win_eps if win_eps else 0.0,
                    "failure_rate": win_fail / win_eps if win_eps else 0.0,
                    "latent_value": lv,
                }
            )
            win_succ = win_fail = win_eps = 0

    greedy = _greedy(q, visits)
    if cfg.smoothing == 0:
        entry = phi.push(mdp.initial) > 0
        entry[classes[room.reset]] = False
        missing = np.flatnonzero(entry & (visits.sum(axis=1) == 0))
        if len(missing):
            raise NoExplorationCoverage(
                f"room {room.name}, direction {direction!r}: latent entry state {int(missing[0])} was never explored"
            )
    latent_policy = Policy.from_actions(greedy, n_act)
    source = TrajectorySource(mdp, lift_policy(phi, latent_policy), room.reset, seed=cfg.seed + 1)
    report = certify_online(source, latent, phi, cfg.epsilon, cfg.delta, cfg.gamma, cap=cfg.cert_cap, raise_on_cap=False)
    lv = _latent_value(latent, greedy, cfg.gamma)
    art = TrainedRoomArtifact(room.name, direction, phi, latent, latent_policy, q, report, lv, curves, cfg)
    art.check()
    return art


def _fit_latent(samples, phi, room, good, bad, n_act, smoothing) -> LatentMdp:
    return empirical_latent_mdp(
        samples,
        phi,
        n_act,
        smoothing=smoothing,
        reset=room.reset,
        target=np.flatnonzero(good),
        bad=np.flatnonzero(bad),
        unseen="self",
    )


def _latent_value(latent: LatentMdp, actions: np.ndarray, gamma: float) -> float:
    """Value of the deterministic latent policy from the latent initial distribution."""
    pol = Policy.from_actions(actions, latent.mdp.n_actions)
    return float(latent.mdp.initial @ latent_room_values(latent, pol, gamma))


# ---------------------------------------------------------------------------
# Entrance learning


@dataclass(frozen=True)
class EntranceEstimate:
    """Empirical latent entrances, entry counts, and the (room, direction) pairs never entered."""

    entrances: Mapping[tuple[str, str], np.ndarray]
    counts: Mapping[tuple[str, str], int]
    unseen: frozenset[tuple[str, str]]

    def to_json(self) -> dict:
        return {
            "schema": ARTIFACT_SCHEMA,
            "entrances": [
                {"room": r, "direction": d, "dist": v.tolist(), "count": self.counts[(r, d)]}
                for (r, d), v in sorted(self.entrances.items())
            ],
            "unseen": sorted([list(k) for k in self.unseen]),
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "EntranceEstimate":
        _check_schema(data.get("schema"), "entrance estimate")
        ent = {(e["room"], e["direction"]): np.asarray(e["dist"], dtype=np.float64) for e in data["entrances"]}
        counts = {(e["room"], e["direction"]): int(e["count"]) for e in data["entrances"]}
        return cls(ent, counts, frozenset(tuple(k) for k in data.get("unseen", [])))


def learn_entrance(
    h: TwoLevelModel,
    catalog: Mapping[tuple[str, str], Policy],
    embeddings: Mapping[str, Embedding],
    rollouts: int,
    seed: int = 0,
    horizon: int = 1000,
) -> EntranceEstimate:
    """Empirical frequencies of embedded entry states under a uniformly random planner.

    Each rollout starts from the initial entrance and keeps exploring
    (targets do not stop it) until a bad state, the reset or ``horizon``.
    """
    if rollouts < 1:
        raise ModelError("rollouts must be at least 1")
    rng = np.random.default_rng(seed)
    samplers = {name: Sampler(room.mdp, rng) for name, room in h.rooms.items()}
    counts: dict[tuple[str, str], np.ndarray] = {}
    exit_sets = {k: h.rooms[k[0]].exit_mask(k[1]) for k in catalog}
    bad_sets = {name: room.bad_mask() for name, room in h.rooms.items()}

    def record(u: str, v: str) -> int:
        room = h.room(u)
        s = _draw(h.entrance(u, v), rng.random())
        key = (room.name, h.local_direction(u, v))
        if key not in counts:
            counts[key] = np.zeros(embeddings[room.name].n_latent)
        counts[key][embeddings[room.name].classes[s]] += 1
        return s

    for _ in range(rollouts):
        v = h.v0
        s = record(v, h.d0[1])
        d = h.d1
        t = 0
        while t < horizon:
            room = h.room(v)
            if s == room.reset or bad_sets[room.name][s]:
                break
            key = h.key(*d)
            if key not in catalog:
                raise ModelError(f"no policy for room {key[0]}, direction {key[1]!r}")
            t += 1
            if exit_sets[key][s]:
                u = d[1]
                s = record(u, v)
                v = u
                ns = h.graph.neighbors(v)
                d = (v, ns[int(rng.integers(len(ns)))])
                continue
            a = _draw(catalog[key].probs[s], rng.random())
            s = samplers[room.name].next_state(s, a)

    entrances = {k: c / c.sum() for k, c in counts.items()}
    every = {(h.room(u).name, h.local_direction(u, v)) for v, u in h.graph.half_edges}
    every.add((h.room(h.v0).name, h.local_direction(h.v0, h.d0[1])))
    return EntranceEstimate(
        entrances, {k: int(c.sum()) for k, c in counts.items()}, frozenset(every - set(counts))
    )


def save_artifact(art: TrainedRoomArtifact, path: str) -> None:
    with open(path, "w") as f:
        json.dump(art.to_json(), f, sort_keys=True)


def load_artifact(path: str) -> TrainedRoomArtifact:
    with open(path) as f:
        return TrainedRoomArtifact.from_json(json.load(f))
