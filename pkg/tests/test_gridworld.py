import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roomsynth.errors import InvalidRoom, StateSpaceTooLarge
from roomsynth.gridworld import (
    DEAD,
    GridRoomConfig,
    GridSimulator,
    GridState,
    adversary_step,
    build_grid_room,
    build_room,
    entrance_distribution,
    grid_map,
    load_grid_config,
    potential,
    room_layout,
    shaped_reward,
    state_count_bound,
    successors,
)
from roomsynth.twolevel import validate

OPEN3 = ("...", "W..", "...")
CORRIDOR = ("#####", "W...E", "#####")
N, E, S, W = range(4)


def open_room(size=5, **kw):
    return GridRoomConfig(room_layout(size, size, ["E", "W"]), **kw)


# ---- tabular export -------------------------------------------------------


@pytest.mark.parametrize("limit", [1, 2, 5])
def test_three_by_three_state_count(limit):
    cfg = GridRoomConfig(OPEN3, step_limit=limit)
    g = build_grid_room(cfg)
    assert g.room.n_states == 9 * (limit + 1) + 1
    assert state_count_bound(cfg) == g.room.n_states


def test_no_step_limit_keeps_one_copy_per_cell():
    g = build_grid_room(GridRoomConfig(OPEN3))
    assert g.room.n_states == 10


def test_entering_from_the_left_places_agent_at_entry_cell():
    g = build_grid_room(GridRoomConfig(OPEN3, step_limit=3))
    ent = g.room.entrance["W"]
    (i,) = np.flatnonzero(ent)
    assert ent[i] == 1.0
    assert g.decode(i) == GridState((1, 1), (), 1, 0)


def test_collision_costs_a_life():
    cfg = GridRoomConfig(CORRIDOR, ("random",), lives=2)
    s = GridState((1, 1), ((3, 1),), 2)
    out = successors(cfg, s, E)
    hit = sum(p for t, p in out.items() if t is not None and t.life == 1)
    # at the corridor end the adversary stays or moves west onto (2, 1)
    assert hit == pytest.approx(1 / 2)
    one_life = GridRoomConfig(CORRIDOR, ("random",), lives=1)
    out = successors(one_life, GridState((1, 1), ((3, 1),), 1), E)
    assert out[DEAD] == pytest.approx(1 / 2)


def test_swapping_cells_counts_as_collision():
    cfg = GridRoomConfig(CORRIDOR, ("wall-follower",))
    out = successors(cfg, GridState((2, 1), ((3, 1),), 1), E)
    # the adversary at the east end moves west w.p. 0.9 and swaps with the agent
    assert out[DEAD] == pytest.approx(1.0)


def test_dead_and_step_limit_go_to_reset():
    cfg = GridRoomConfig(CORRIDOR, ("random",), step_limit=2)
    g = build_grid_room(cfg)
    dead = g.index[DEAD]
    assert g.room.bad == frozenset([dead])
    for a in range(4):
        assert g.room.mdp.row(dead, a)[g.room.reset] == 1.0
    s = g.index[GridState((1, 1), ((3, 1),), 1, 2)]
    assert g.room.mdp.row(s, N)[g.room.reset] == 1.0


def test_exits_are_door_cells():
    g = build_grid_room(GridRoomConfig(CORRIDOR, ("chaser",)))
    for d, door in g.config.doors.items():
        assert {g.decode(i).agent for i in g.room.exits[d]} == set(door)


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_seeded_rooms_pass_validation(seed):
    rng = np.random.default_rng(seed)
    size = int(rng.integers(3, 6))
    dirs = sorted(rng.choice(["N", "E", "S", "W"], size=int(rng.integers(1, 4)), replace=False))
    layout = room_layout(size, size, dirs, int(rng.integers(0, 3)), rng)
    advs = tuple(rng.choice(["random", "chaser", "wall-follower"], size=int(rng.integers(0, 2))))
    cfg = GridRoomConfig(layout, advs, int(rng.integers(1, 3)))
    room = build_room(cfg)
    room.validate()
    assert room.n_states == state_count_bound(cfg)


def test_state_space_cap():
    cfg = open_room(5, adversaries=("random", "random"), lives=2)
    with pytest.raises(StateSpaceTooLarge) as err:
        build_grid_room(cfg, cap=1000)
    assert err.value.count == state_count_bound(cfg) and err.value.cap == 1000


@pytest.mark.parametrize(
    "layout",
    [
        ("...", ".W.", "..."),  # door off the boundary
        ("W#.", "#..", "..."),  # door with no floor behind it
        ("...", "...", "..."),  # no doors
        ("..", "W.."),  # ragged rows
        ("..x", "W..", "..."),  # unknown character
    ],
)
def test_invalid_layouts(layout):
    with pytest.raises(InvalidRoom):
        GridRoomConfig(layout).validate()


def test_invalid_options():
    with pytest.raises(InvalidRoom):
        GridRoomConfig(OPEN3, ("teleporter",)).validate()
    with pytest.raises(InvalidRoom):
        GridRoomConfig(OPEN3, lives=0).validate()
    with pytest.raises(InvalidRoom):
        GridRoomConfig(OPEN3, powerup_prob=1.5).validate()


def test_powerups_rejected_by_tabular_export():
    with pytest.raises(InvalidRoom):
        build_grid_room(GridRoomConfig(OPEN3, powerup_prob=0.1))


# ---- adversaries ----------------------------------------------------------


def test_random_adversary_in_open_centre():
    cfg = open_room(5)
    dist = adversary_step("random", cfg, (2, 2), (0, 0))
    assert len(dist) == 5
    assert all(p == pytest.approx(0.2) for p in dist.values())


def test_chaser_left_of_agent():
    cfg = open_room(7)
    dist = adversary_step("chaser", cfg, (2, 3), (3, 3))
    assert dist[(3, 3)] == pytest.approx(0.8 + 0.2 / 5)
    assert sum(dist.values()) == pytest.approx(1.0)


def test_wall_follower_advances_along_corridor():
    cfg = GridRoomConfig(CORRIDOR)
    dist = adversary_step("wall-follower", cfg, (2, 1), (1, 1))
    assert max(dist.values()) == pytest.approx(0.9)
    assert dist[(3, 1)] == pytest.approx(0.9)
    vertical = GridRoomConfig(("#N#", "#.#", "#.#", "#S#"))
    dist = adversary_step("wall-follower", vertical, (1, 2), (1, 1))
    assert dist[(1, 1)] == pytest.approx(0.9)


@pytest.mark.parametrize("behavior", ["random", "chaser", "wall-follower"])
def test_adversaries_stay_on_floor(behavior):
    cfg = GridRoomConfig(CORRIDOR)
    for cell in cfg.floor:
        dist = adversary_step(behavior, cfg, cell, (2, 1))
        assert sum(dist.values()) == pytest.approx(1.0)
        assert all(cfg.char(c) == "." for c in dist)


def test_entrance_distribution_respects_radius():
    cfg = open_room(5, adversaries=("random",), entry_radius=2)
    dist = entrance_distribution(cfg, "W")
    assert sum(dist.values()) == pytest.approx(1.0)
    door = cfg.doors["W"][0]
    for s in dist:
        (adv,) = s.adversaries
        assert abs(adv[0] - door[0]) + abs(adv[1] - door[1]) <= 2
        assert adv != s.agent


# ---- shaping --------------------------------------------------------------


def test_potential_bounds_and_reset():
    cfg = open_room(5)
    target = cfg.doors["E"]
    values = [potential(cfg, GridState(c, (), 1), target) for c in cfg.cells]
    assert min(values) >= 0 and max(values) == 1.0
    assert potential(cfg, None, target) == 0.0
    assert potential(cfg, DEAD, target) == 0.0


def test_shaping_examples():
    cfg = open_room(5)
    s = GridState((2, 2), (), 1)
    phi = potential(cfg, s, cfg.doors["E"])
    # standing still
    assert shaped_reward(cfg, s, N, s, 0.9, "E") == pytest.approx((0.9 - 1) * phi)
    # one step toward the door raises the potential by 1/(w+h)
    t = GridState((3, 2), (), 1)
    assert potential(cfg, t, cfg.doors["E"]) - phi == pytest.approx(1 / 10)
    assert shaped_reward(cfg, s, E, t, 1.0, "E") == pytest.approx(0.1)
    # losing the last life
    assert shaped_reward(cfg, DEAD, N, None, 0.9, "E") == pytest.approx(-1.0)
    door = GridState(cfg.doors["E"][0], (), 1)
    assert shaped_reward(cfg, door, E, None, 0.9, "E") == pytest.approx(1.0 - 1.0)
    assert shaped_reward(cfg, s, E, door, 0.9, "E", base_on="successor") == pytest.approx(
        0.9 - phi + 1.0
    )


@given(st.integers(0, 2**32 - 1), st.floats(0.5, 1.0))
def test_shaping_telescopes(seed, gamma):
    cfg = GridRoomConfig(room_layout(5, 4, ["E", "W"], 2, seed), ("chaser",), lives=2)
    sim = GridSimulator(cfg, seed)
    rng = np.random.default_rng(seed)
    path = [sim.reset("W")]
    actions = []
    while path[-1] is not None and len(path) < 60:
        a = int(rng.integers(4))
        actions.append(a)
        path.append(sim.step(a) if path[-1].life > 0 else None)
    shaped = sum(
        gamma**t * shaped_reward(cfg, s, a, s2, gamma, "E") for t, (s, a, s2) in enumerate(zip(path, actions, path[1:]))
    )
    base = sum(
        gamma**t * shaped_reward(cfg, s, a, s2, gamma, "E") - gamma**t * (gamma * potential(cfg, s2, cfg.doors["E"]) - potential(cfg, s, cfg.doors["E"]))
        for t, (s, a, s2) in enumerate(zip(path, actions, path[1:]))
    )
    k = len(actions)
    targets = cfg.doors["E"]
    expected = gamma**k * potential(cfg, path[-1], targets) - potential(cfg, path[0], targets) + base
    assert abs(shaped - expected) < 1e-9
    assert all(0.0 <= potential(cfg, s, targets) <= 1.0 for s in path)


# ---- simulator ------------------------------------------------------------


def _tabular_cfg():
    return GridRoomConfig(room_layout(4, 4, ["E", "W"], 1, 3), ("chaser", "random"), lives=2)


@pytest.fixture(scope="module")
def tabular():
    return build_grid_room(_tabular_cfg())


def test_simulated_transitions_have_positive_tabular_mass(tabular):
    g = tabular
    cfg = g.config
    sim = GridSimulator(cfg, 0)
    rng = np.random.default_rng(1)
    s = sim.reset()
    for _ in range(3000):
        if s is None or s.life == 0:
            nxt = None
            sim.set_state(None)
            s = sim.reset()
            continue
        a = int(rng.integers(4))
        nxt = sim.step(a)
        assert g.room.mdp.row(g.encode(s), a)[g.encode(nxt)] > 0
        s = nxt if nxt is not None else sim.reset()


@pytest.mark.parametrize("pair", [0, 1, 2])
def test_simulator_matches_tabular_rows(pair, tabular):
    g = tabular
    cfg = g.config
    rng = np.random.default_rng(pair)
    s = g.states[int(rng.integers(len(g.states) - 1))]
    a = int(rng.integers(4))
    sim = GridSimulator(cfg, pair)
    counts = Counter()
    n = 10_000
    for _ in range(n):
        sim.set_state(s)
        counts[g.encode(sim.step(a))] += 1
    emp = np.zeros(g.room.n_states)
    for i, c in counts.items():
        emp[i] = c / n
    tv = 0.5 * np.abs(emp - g.room.mdp.row(g.encode(s), a)).sum()
    assert tv <= 0.02


def test_simulator_entry_and_exit_direction():
    cfg = GridRoomConfig(CORRIDOR)
    sim = GridSimulator(cfg, 0)
    assert sim.reset("W").agent == (1, 1)
    for _ in range(3):
        sim.step(E)
    assert sim.exit_direction() == "E"
    sim.set_state(None)
    with pytest.raises(InvalidRoom):
        sim.step(E)


def test_simulator_powerup_shields_collisions():
    cfg = GridRoomConfig(CORRIDOR, ("wall-follower",), powerup_prob=1.0, powerup_duration=3)
    s = GridState((1, 1), ((3, 1),), 1, powerup=(2, 1))
    out = successors(cfg, s, E)
    live = [t for t in out if t != DEAD]
    assert live and all(t.shield == 3 and t.powerup is None for t in live)
    shielded = GridState((2, 1), ((3, 1),), 1, shield=2)
    out = successors(cfg, shielded, E)
    assert DEAD not in out
    sim = GridSimulator(cfg, 0)
    sim.reset("W")
    assert sim.step(W) is not None


def test_simulator_is_deterministic_given_seed():
    cfg = _tabular_cfg()

    def run(seed):
        sim = GridSimulator(cfg, seed)
        out = [sim.reset()]
        for t in range(40):
            if out[-1] is None or out[-1].life == 0:
                break
            out.append(sim.step(t % 4))
        return out

    assert run(5) == run(5)


# ---- serialization and maps ----------------------------------------------


def test_ascii_ingestion():
    cfg = GridRoomConfig.from_ascii(
        """
        #N###
        #...#
        W.#.E
        #...#
        """
    )
    assert cfg.directions == ("E", "N", "W")
    assert cfg.entry_cells("N") == ((1, 1),)
    with pytest.raises(InvalidRoom):
        GridRoomConfig.from_ascii("###\n#.#\n###")


def test_config_json_round_trip(tmp_path):
    cfg = open_room(5, adversaries=("chaser",), lives=2, step_limit=7, entry_radius=3)
    assert GridRoomConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg
    path = tmp_path / "room.json"
    path.write_text(json.dumps(cfg.to_json()))
    assert load_grid_config(str(path)) == cfg


def test_grid_map_structure():
    gm = grid_map(2, 2, room_width=3, room_height=3, adversaries=1, seed=4)
    h = gm.model
    validate(h)
    assert sorted(h.graph.vertices) == ["r00", "r01", "r10", "r11"]
    assert h.targets == frozenset(["r11"])
    assert h.v0 == "r00" and h.d0[0] == "r00"
    for v in h.graph.vertices:
        lab = h.labeling[v]
        assert set(lab.directions.values()) == set(h.graph.neighbors(v))
        assert set(lab.directions) == set(gm.configs[v].directions)
    assert json.loads(json.dumps(gm.to_json()))["model"]


def test_grid_map_is_seeded():
    a = grid_map(1, 3, room_width=3, room_height=3, obstacles=1, seed=2)
    b = grid_map(1, 3, room_width=3, room_height=3, obstacles=1, seed=2)
    assert a.configs == b.configs
