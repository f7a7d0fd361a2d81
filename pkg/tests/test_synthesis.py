import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roomsynth.errors import (
    ImproperPolicy,
    MissingPolicy,
    ModelError,
    NonEpisodicRoom,
    OracleOutOfRange,
    SupportMismatch,
)
from roomsynth.latent import Embedding, LatentMdp
from roomsynth.mdp import Mdp, Policy
from roomsynth.random_models import (
    chain_room,
    memory_instance,
    random_catalog,
    random_lifted_instance,
    random_room,
    random_two_level_model,
)
from roomsynth.synthesis import (
    LatentRoomModel,
    Planner,
    TwoLevelController,
    build_mdp_plan,
    build_succinct,
    entrance_loss,
    execute_controller,
    expected_tv,
    ground_oracle,
    is_proper,
    latent_oracle,
    lifted_bound,
    memoryless_planner,
    plan_policy_to_planner,
    plan_stationary,
    plan_value,
    planner_to_plan_policy,
    room_value_oracle_exact,
    succinct_value,
    synthesize_planner,
)
from roomsynth.twolevel import MapGraph, Room, TwoLevelModel, VertexLabel

seeds = st.integers(0, 2**32 - 1)


def single_action_catalog(h):
    return {(name, d): Policy.from_actions(np.zeros(r.n_states, dtype=int), 1)
            for name, r in h.rooms.items() for d in r.directions}


def corridor(length=3, p=1.0):
    """Path v0 - v1 - ... - v{length}; inner rooms pass straight through with probability p."""
    verts = [f"v{i}" for i in range(length + 1)]
    g = MapGraph.build(verts, list(zip(verts, verts[1:])))
    end = chain_room("end", ("out",), {"out": {"out": 1.0}})
    mid = chain_room("mid", ("l", "r"), {"l": {"r": p, "l": 1 - p}, "r": {"l": p, "r": 1 - p}})
    lab = {verts[0]: VertexLabel("end", {"out": verts[1]}), verts[-1]: VertexLabel("end", {"out": verts[-2]})}
    for i in range(1, length):
        lab[verts[i]] = VertexLabel("mid", {"l": verts[i - 1], "r": verts[i + 1]})
    d = (verts[0], verts[1])
    return TwoLevelModel(g, {"end": end, "mid": mid}, lab, verts[0], d, d, frozenset([verts[-1]]))


def two_room_edge(room_a, room_b):
    g = MapGraph.build(["a", "b"], [("a", "b")])
    lab = {"a": VertexLabel(room_a.name, {"x": "b"}), "b": VertexLabel(room_b.name, {"x": "a"})}
    return TwoLevelModel(g, {room_a.name: room_a, room_b.name: room_b}, lab, "a", ("a", "b"), ("a", "b"),
                         frozenset(["b"]))


# ---- MDP plan -----------------------------------------------------------


def test_plan_shape_and_rows():
    room = random_room(5, "R", ("x",), 6)
    h = two_room_edge(room, room)
    cat = random_catalog(1, h)
    plan = build_mdp_plan(h, cat)
    assert plan.mdp.n_states == 2 * (room.n_states - 1) + 2
    chain = room.mdp.chain(cat[("R", "x")])
    d = ("a", "b")
    for s in range(room.n_states):
        if s == room.reset or s in room.exits["x"]:
            continue
        i = plan.state_index(s, *d)
        row = plan.mdp.row(i, 0)
        expect = chain[s].toarray().ravel()
        for t in range(room.n_states):
            assert row[plan.state_index(t, *d)] == pytest.approx(expect[t])
        assert plan.mdp.row(i, plan.action_of(("b", "a")))[plan.bottom] == 1.0


def test_plan_exit_rows():
    h = corridor(3)
    plan = build_mdp_plan(h, single_action_catalog(h))
    # exit of v1 towards v2, committing to (v2, v3) next
    d = ("v0", "v1")
    exit_state = next(iter(h.exits("v1", "v2")))
    i = plan.state_index(exit_state, *("v1", "v2"))
    assert plan.exit_mask[i]
    row = plan.mdp.row(i, plan.action_of(("v2", "v3")))
    entry = h.entrance("v2", "v1")
    for s in np.flatnonzero(entry):
        assert row[plan.state_index(int(s), "v2", "v3")] == pytest.approx(entry[s])
    assert plan.mdp.row(i, 0)[plan.bottom] == 1.0
    assert plan.mdp.row(i, plan.action_of(d))[plan.bottom] == 1.0
    assert all(plan.mdp.row(plan.bottom, a)[plan.bottom] == 1.0 for a in range(plan.mdp.n_actions))


def test_plan_errors():
    h = random_two_level_model(3)
    cat = random_catalog(3, h)
    cat.pop(next(iter(cat)))
    with pytest.raises(MissingPolicy):
        build_mdp_plan(h, cat)
    # the entered state is a trap from which the reset is unreachable
    mdp = Mdp.from_rows(3, 1, {(0, 0): [(2, 1.0)], (1, 0): [(1, 1.0)], (2, 0): [(1, 1.0)]}, {1: 1.0})
    trap = Room("T", mdp, ("x",), {"x": np.array([0, 1.0, 0])}, {"x": frozenset([0])}, frozenset(), 2)
    h2 = two_room_edge(trap, chain_room("B", ("x",), {"x": {"x": 1.0}}))
    with pytest.raises(NonEpisodicRoom):
        build_mdp_plan(h2, single_action_catalog(h2))


def test_properness():
    h = corridor(3)
    plan = build_mdp_plan(h, single_action_catalog(h))
    planner = planner_from_exits(h, {"v0": ("v0", "v1"), "v1": ("v1", "v2"), "v2": ("v2", "v3"), "v3": ("v3", "v2")})
    pol = planner_to_plan_policy(planner, plan)
    assert is_proper(plan, pol)
    acts = pol.actions.copy()
    acts[plan.state_index(0, "v0", "v1")] = plan.action_of(("v0", "v1"))
    bad = Policy.from_actions(acts, plan.mdp.n_actions)
    assert not is_proper(plan, bad)
    with pytest.raises(ImproperPolicy):
        plan_policy_to_planner(bad, plan)


def planner_from_exits(h, exit_of):
    return memoryless_planner(h, exit_of)


@given(seeds, st.sampled_from([0.5, 0.9, 0.99]))
@settings(max_examples=20)
def test_value_equality_and_round_trip(seed, gamma):
    rng = np.random.default_rng(seed)
    h = random_two_level_model(rng)
    cat = random_catalog(rng, h)
    plan = build_mdp_plan(h, cat)
    succ = build_succinct(h, ground_oracle(h, cat, gamma, 1e-12), gamma)
    planner, predicted = synthesize_planner(succ, h.targets, 1e-12)
    pol = planner_to_plan_policy(planner, plan)
    assert is_proper(plan, pol)
    value = plan_value(plan, pol, gamma, 1e-12)
    assert abs(value - predicted) < 1e-8
    assert abs(value - succinct_value(succ, planner, h.targets, 1e-12)) < 1e-8
    back = plan_policy_to_planner(pol, plan)
    assert back.edge_choices(h) == planner.edge_choices(h)
    assert np.array_equal(planner_to_plan_policy(back, plan).actions, pol.actions)


def test_memoryless_planner_depends_on_vertex_only():
    h = random_two_level_model(8, max_vertices=4)
    cat = random_catalog(8, h)
    plan = build_mdp_plan(h, cat)
    exit_of = {v: h.graph.out(v)[-1] for v in h.graph.vertices}
    exit_of[h.v0] = h.d1
    planner = memoryless_planner(h, exit_of)
    pol = planner_to_plan_policy(planner, plan)
    for d in planner.edge_choices(h):
        sl = plan.block_slice(d)
        idx = np.arange(sl.start, sl.stop)[plan.exit_mask[sl]]
        for i in idx:
            # exit states of block (v, u) choose the exit of u
            assert plan.actions[pol.actions[i]] == exit_of[d[1]]


# ---- memory instance -----------------------------------------------------


def memory_setup(gamma=0.99):
    h = memory_instance()
    cat = single_action_catalog(h)
    return h, cat, build_succinct(h, ground_oracle(h, cat, gamma, 1e-12), gamma)


def test_memory_planner_uses_entry_direction():
    h, cat, succ = memory_setup()
    planner, value = synthesize_planner(succ, h.targets, 1e-12)
    choices = planner.edge_choices(h)
    assert choices[("s", "h")] == ("h", "o")
    assert choices[("o", "h")] == ("h", "g")
    plan = build_mdp_plan(h, cat)
    pol = planner_to_plan_policy(planner, plan)
    exit_to_o = next(iter(h.exits("h", "o")))
    exit_to_g = next(iter(h.exits("h", "g")))
    assert plan.actions[pol.actions[plan.state_index(exit_to_o, "h", "o")]] == ("o", "h")
    assert plan.actions[pol.actions[plan.state_index(exit_to_g, "h", "g")]] == ("g", "h")
    assert plan_value(plan, pol, 0.99, 1e-12) == pytest.approx(value, abs=1e-10)


def test_memory_beats_every_memoryless_planner():
    h, _, succ = memory_setup()
    _, value = synthesize_planner(succ, h.targets, 1e-12)
    best = 0.0
    for combo in itertools.product(*(h.graph.out(v) for v in h.graph.vertices)):
        exit_of = dict(zip(h.graph.vertices, combo))
        if exit_of[h.v0] != h.d1:
            continue
        best = max(best, succinct_value(succ, memoryless_planner(h, exit_of), h.targets, 1e-12))
    assert value - best >= 0.1


# ---- succinct model and oracles ------------------------------------------


def test_succinct_probabilities_from_oracle():
    h = corridor(3)
    succ = build_succinct(h, lambda room, exit_dir, entry_dir: 0.81, 0.9)
    idx = h.graph.half_edge_index
    i = succ.edges.index(("v0", "v1"))
    row = succ.mdp.row(i, idx[("v1", "v2")])
    assert row[idx[("v1", "v2")]] == pytest.approx(0.81)
    assert row[succ.bottom] == pytest.approx(0.19)
    # an exit that does not leave the entered room goes to the sink
    assert succ.mdp.row(i, idx[("v2", "v3")])[succ.bottom] == 1.0
    assert succ.contraction <= 0.9 + 1e-12
    assert succ.report()[0]["to_sink"] == pytest.approx(1 - succ.report()[0]["probability"])


def test_zero_oracle_gives_zero_value():
    h = random_two_level_model(2)
    succ = build_succinct(h, lambda *a: 0.0, 0.9)
    planner, value = synthesize_planner(succ, h.targets)
    assert value == 0.0
    for (_, u), nxt in planner.edge_choices(h).items():
        assert nxt == h.graph.out(u)[0]


def test_oracle_out_of_range():
    h = corridor(3)
    with pytest.raises(OracleOutOfRange):
        build_succinct(h, lambda *a: 0.95, 0.9)
    with pytest.raises(OracleOutOfRange):
        build_succinct(h, lambda *a: -0.1, 0.9)


def test_corridor_value_is_product():
    p = 0.7
    h = corridor(3)
    succ = build_succinct(h, lambda *a: p, 0.9)
    _, value = synthesize_planner(succ, h.targets, 1e-12)
    assert value == pytest.approx(p**3)


def test_room_value_oracle_examples():
    # entrance 0 -> 1 -> exit 2; state 3 bad; 4 reset
    rows = {(0, 0): [(1, 1.0)], (1, 0): [(2, 1.0)], (2, 0): [(4, 1.0)], (3, 0): [(4, 1.0)], (4, 0): [(0, 1.0)]}
    mdp = Mdp.from_rows(5, 1, rows, {0: 1.0})
    room = Room("R", mdp, ("x",), {"x": np.eye(5)[0]}, {"x": frozenset([2])}, frozenset([3]), 4)
    pol = Policy.from_actions(np.zeros(5, dtype=int), 1)
    phi = Embedding.identity(5)
    assert room_value_oracle_exact(room, pol, phi, "x", 0.9, "x") == pytest.approx(0.81)
    assert room_value_oracle_exact(room, pol, phi, "x", 0.9, np.eye(5)[3]) == 0.0


def test_two_entrance_expectation():
    g = 0.9
    rows = {(0, 0): [(2, 0.8 / g), (3, 1 - 0.8 / g)], (1, 0): [(2, 0.6 / g), (3, 1 - 0.6 / g)],
            (2, 0): [(4, 1.0)], (3, 0): [(4, 1.0)], (4, 0): [(0, 0.5), (1, 0.5)]}
    mdp = Mdp.from_rows(5, 1, rows, {0: 0.5, 1: 0.5})
    ent = np.array([0.5, 0.5, 0, 0, 0])
    room = Room("R", mdp, ("x",), {"x": ent}, {"x": frozenset([2])}, frozenset([3]), 4)
    pol = Policy.from_actions(np.zeros(5, dtype=int), 1)
    assert room_value_oracle_exact(room, pol, Embedding.identity(5), "x", g, "x") == pytest.approx(0.7)


def test_latent_oracle_on_exact_quotient_matches_ground():
    h = random_two_level_model(6)
    cat = random_catalog(6, h)
    gamma = 0.9
    from roomsynth.twolevel import training_mdp, training_objective_sets

    models = {}
    for (name, d), pol in cat.items():
        room = h.rooms[name]
        good, bad = training_objective_sets(room, d)
        lat = LatentMdp(training_mdp(room, d), room.reset, frozenset(np.flatnonzero(good).tolist()),
                        frozenset(np.flatnonzero(bad).tolist()))
        models[(name, d)] = LatentRoomModel(lat, pol, Embedding.identity(room.n_states))
    ground = ground_oracle(h, cat, gamma, 1e-12)
    latent = latent_oracle(h, models, {}, gamma, 1e-12)
    for name, room in h.rooms.items():
        for e in room.directions:
            for x in room.directions:
                assert abs(ground(name, e, x) - latent(name, e, x)) < 1e-9


# ---- plan values -------------------------------------------------------


def test_start_in_target_has_value_one():
    h = corridor(3)
    h1 = TwoLevelModel(h.graph, h.rooms, h.labeling, h.v0, h.d0, h.d1, frozenset(["v0"]))
    plan = build_mdp_plan(h1, single_action_catalog(h1))
    succ = build_succinct(h1, ground_oracle(h1, single_action_catalog(h1), 0.9), 0.9)
    planner, value = synthesize_planner(succ, h1.targets)
    assert value == 1.0
    assert plan_value(plan, planner_to_plan_policy(planner, plan), 0.9) == 1.0


def test_everything_bad_has_value_zero():
    h = random_two_level_model(1)
    rooms = {}
    for name, r in h.rooms.items():
        rooms[name] = Room(name, r.mdp, r.directions, r.entrance, r.exits,
                           frozenset(s for s in range(r.n_states) if s != r.reset), r.reset)
    hb = TwoLevelModel(h.graph, rooms, h.labeling, h.v0, h.d0, h.d1, h.targets)
    cat = random_catalog(1, hb)
    plan = build_mdp_plan(hb, cat)
    planner, value = synthesize_planner(build_succinct(hb, ground_oracle(hb, cat, 0.9), 0.9), hb.targets)
    assert value == 0.0
    assert plan_value(plan, planner_to_plan_policy(planner, plan), 0.9) == 0.0


# ---- entrance loss and lifted bound ---------------------------------------


def test_expected_tv_weighted_mean():
    assert expected_tv([0.25, 0.75], [0.2, 0.0]) == pytest.approx(0.05)
    assert expected_tv([1.0], [0.2]) == pytest.approx(0.2)


def lifted_setup(seed, gamma=0.9):
    inst = random_lifted_instance(seed, gamma)
    h = inst.model
    plan = build_mdp_plan(h, inst.catalog)
    succ = build_succinct(h, ground_oracle(h, inst.catalog, gamma), gamma)
    planner, _ = synthesize_planner(succ, h.targets)
    pol = planner_to_plan_policy(planner, plan)
    return inst, plan, planner, pol, plan_stationary(plan, pol)


def test_entrance_loss_examples():
    inst, plan, _, _, xi = lifted_setup(0)
    h = inst.model
    exact = {(r.name, d): r.entrance[d] for r in h.rooms.values() for d in r.directions}
    assert entrance_loss(plan, xi, inst.embeddings, exact) == 0.0
    shifted = dict(exact)
    a = h.rooms["A"]
    e = np.asarray(a.entrance["x"])
    other = np.zeros_like(e)
    other[np.argmax(e == 0) if np.any(e == 0) else 0] = 1.0
    shifted[("A", "x")] = 0.8 * e + 0.2 * other
    tv = 0.5 * np.abs(shifted[("A", "x")] - e).sum()
    # room A is entered only at restarts
    assert entrance_loss(plan, xi, inst.embeddings, shifted) == pytest.approx(xi[plan.reset] * tv)


def test_lifted_bound_zero_losses():
    inst, plan, _, pol, xi = lifted_setup(1)
    zero = {k: 0.0 for k in inst.losses}
    lb = lifted_bound(plan, pol, 0.0, zero, 0.9, xi)
    assert lb.bound == 0.0
    assert lb.kappa == 1.0
    assert not lb.vacuous


@given(st.integers(0, 10_000))
@settings(max_examples=10)
def test_lifted_bound_sound(seed):
    inst, plan, planner, pol, xi = lifted_setup(seed)
    h = inst.model
    li = entrance_loss(plan, xi, inst.embeddings, inst.latent_entrances)
    lb = lifted_bound(plan, pol, li, inst.losses, 0.9, xi)
    value = plan_value(plan, pol, 0.9, 1e-12)
    lsucc = build_succinct(h, latent_oracle(h, inst.latent_models, inst.latent_entrances, 0.9), 0.9)
    latent_value = succinct_value(lsucc, planner, h.targets, 1e-12)
    assert abs(value - latent_value) <= lb.bound + 1e-9


def test_support_mismatch_without_exact_mode():
    h = random_two_level_model(0)
    cat = random_catalog(0, h)
    plan = build_mdp_plan(h, cat)
    planner, _ = synthesize_planner(build_succinct(h, ground_oracle(h, cat, 0.9), 0.9), h.targets)
    pol = planner_to_plan_policy(planner, plan)
    losses = {k: 0.1 for k in cat}
    with pytest.raises(SupportMismatch):
        lifted_bound(plan, pol, 0.0, losses, 0.9, exact=False)
    lb = lifted_bound(plan, pol, 0.0, losses, 0.9, exact=True)
    assert lb.kappa_mode == "stationary-ratio"


# ---- planners and execution ----------------------------------------------


def test_planner_json_and_validation():
    h = random_two_level_model(4)
    cat = random_catalog(4, h)
    planner, _ = synthesize_planner(build_succinct(h, ground_oracle(h, cat, 0.9), 0.9), h.targets)
    back = Planner.from_json(planner.to_json())
    assert back.alpha == planner.alpha and back.update == planner.update and back.q0 == planner.q0
    wrong = dict(planner.alpha)
    other = [d for d in h.graph.out(h.v0) if d != h.d1]
    if other:
        wrong[(h.v0, planner.q0)] = other[0]
        with pytest.raises(ModelError):
            Planner(planner.q0, wrong, planner.update).validate(h)
    with pytest.raises(ModelError):
        Planner.from_json({"q0": "x"})


def test_deterministic_corridor_always_succeeds():
    h = corridor(3)
    cat = single_action_catalog(h)
    planner, _ = synthesize_planner(build_succinct(h, ground_oracle(h, cat, 0.9), 0.9), h.targets)
    stats = execute_controller(h, TwoLevelController(planner, cat), 0, 200, 100, 0.9)
    assert stats.success_rate == 1.0
    assert np.all(stats.steps == stats.steps[0])


def test_execution_reproducible():
    h = random_two_level_model(5)
    cat = random_catalog(5, h)
    planner, _ = synthesize_planner(build_succinct(h, ground_oracle(h, cat, 0.9), 0.9), h.targets)
    ctrl = TwoLevelController(planner, cat)
    a = execute_controller(h, ctrl, 3, 300, 200, 0.9)
    b = execute_controller(h, ctrl, 3, 300, 200, 0.9)
    assert np.array_equal(a.discounted, b.discounted) and a.visits == b.visits


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_rollouts_match_plan_value(seed):
    gamma = 0.9
    h = random_two_level_model(seed, max_vertices=3, max_room_states=12)
    cat = random_catalog(seed, h)
    plan = build_mdp_plan(h, cat)
    planner, _ = synthesize_planner(build_succinct(h, ground_oracle(h, cat, gamma), gamma), h.targets)
    exact = plan_value(plan, planner_to_plan_policy(planner, plan), gamma, 1e-12)
    stats = execute_controller(h, TwoLevelController(planner, cat), seed, 10_000, 2_000, gamma)
    assert abs(stats.mean_discounted - exact) <= 3 * stats.stderr() + 1e-12
