import csv
import json

import numpy as np
import pytest

from roomsynth.errors import ModelError, NoExplorationCoverage
from roomsynth.gridworld import GridRoomConfig, build_grid_room, grid_map, room_layout
from roomsynth.latent import Embedding, TrajectorySource, certify_online, lift_policy
from roomsynth.mdp import Policy, iteration_cap, solve_optimal, value_on_masks
from roomsynth.random_models import random_two_level_model
from roomsynth.synthesis import latent_room_values
from roomsynth.trainer import (
    EntranceEstimate,
    TrainConfig,
    TrainedRoomArtifact,
    default_embedding,
    learn_entrance,
    load_artifact,
    save_artifact,
    train_room_policy,
)
from roomsynth.twolevel import training_mdp, training_objective_sets

CORRIDOR = ("#####", "W...E", "#####")
FAST = dict(model_every=5000, log_every=5000, cert_cap=20_000)


@pytest.fixture(scope="module")
def corridor():
    return build_grid_room(GridRoomConfig(CORRIDOR))


@pytest.fixture(scope="module")
def guarded():
    return build_grid_room(GridRoomConfig(room_layout(4, 4, ["E", "W"]), ("random",)))


@pytest.fixture(scope="module")
def trained(guarded):
    return train_room_policy(guarded, "E", cfg=TrainConfig(steps=20_000, **FAST))


# ---- configuration --------------------------------------------------------


def test_epsilon_schedule():
    cfg = TrainConfig(steps=100, eps_start=1.0, eps_end=0.1, eps_fraction=0.5)
    assert cfg.epsilon_at(0) == 1.0
    assert cfg.epsilon_at(25) == pytest.approx(0.55)
    assert cfg.epsilon_at(50) == pytest.approx(0.1)
    assert cfg.epsilon_at(99) == pytest.approx(0.1)


@pytest.mark.parametrize(
    "kw",
    [dict(alpha=0.0), dict(alpha=1.5), dict(gamma=1.0), dict(eps_start=0.1, eps_end=0.5), dict(exploration="ucb"), dict(steps=0)],
)
def test_invalid_configs(kw):
    with pytest.raises(ModelError):
        TrainConfig(**kw).validate()


def test_config_from_json_rejects_unknown_keys():
    assert TrainConfig.from_json({"steps": 10}).steps == 10
    with pytest.raises(ModelError):
        TrainConfig.from_json({"episodes": 10})


# ---- embeddings -----------------------------------------------------------


def test_default_embedding_identity(corridor):
    phi = default_embedding(corridor, 1)
    assert np.array_equal(phi.classes, np.arange(corridor.room.n_states))
    with pytest.raises(ModelError):
        default_embedding(corridor, 0)


def test_coarse_embedding_preserves_labels():
    g = build_grid_room(GridRoomConfig(room_layout(6, 6, ["E", "W"]), ("random",)))
    phi = default_embedding(g, 2)
    room = g.room
    labels = np.stack([room.exit_direction, room.bad_mask(), np.arange(room.n_states) == room.reset], axis=1)
    for c in range(phi.n_latent):
        members = labels[phi.classes == c]
        assert (members == members[0]).all()
    # agent cells fall in a 4x4 coarse grid (doors included), adversaries in 2x2
    assert phi.n_latent <= 16 * 4 + 3 * 4
    assert phi.n_latent < room.n_states


# ---- training -------------------------------------------------------------


@pytest.mark.parametrize("gamma", [0.9, 0.99])
def test_corridor_learns_optimal_values(corridor, gamma):
    art = train_room_policy(corridor, "E", cfg=TrainConfig(steps=20_000, gamma=gamma, **FAST))
    mdp = training_mdp(corridor.room, "E")
    good, bad = training_objective_sets(corridor.room, "E")
    exact, _ = solve_optimal(mdp, good, bad, gamma, 1e-12, iteration_cap(gamma))
    learned = latent_room_values(art.latent, art.latent_policy, gamma)
    entries = np.flatnonzero(mdp.initial)
    # entry cells are three steps and one step from the east door
    assert np.allclose(exact.values[entries], [gamma**3, gamma])
    assert np.allclose(learned[art.phi.classes[entries]], exact.values[entries], atol=1e-6)


def test_frozen_exploration_matches_uniform_value(guarded):
    cfg = TrainConfig(steps=50_000, eps_start=1.0, eps_end=1.0, episode_cap=10**6, log_every=50_000, model_every=50_000, cert_cap=20_000)
    art = train_room_policy(guarded, "E", cfg=cfg)
    mdp = training_mdp(guarded.room, "E")
    good, bad = training_objective_sets(guarded.room, "E")
    exact = value_on_masks(mdp, Policy.uniform(mdp), good, bad, 1.0, tol=1e-12, cap=10**6)
    (curve,) = art.curves
    assert curve["success_rate"] == pytest.approx(mdp.initial @ exact.values, abs=0.03)
    assert curve["success_rate"] + curve["failure_rate"] == pytest.approx(1.0)


def test_latent_value_within_certified_bound():
    g = build_grid_room(GridRoomConfig(room_layout(5, 5, ["E", "W"]), ("random",)))
    art = train_room_policy(g, "E", cfg=TrainConfig(steps=200_000, gamma=0.9))
    mdp = training_mdp(g.room, "E")
    good, bad = training_objective_sets(g.room, "E")
    ground = mdp.initial @ value_on_masks(mdp, art.ground_policy(), good, bad, 0.9, tol=1e-12).values
    gap = abs(ground - art.latent_value)
    assert gap <= art.report.init_bound
    assert gap < 0.02


def test_training_is_reproducible(guarded):
    cfg = TrainConfig(steps=5000, seed=3, **FAST)
    a = train_room_policy(guarded, "E", cfg=cfg)
    b = train_room_policy(guarded, "E", cfg=cfg)
    assert json.dumps(a.to_json(), sort_keys=True) == json.dumps(b.to_json(), sort_keys=True)
    c = train_room_policy(guarded, "E", cfg=TrainConfig(steps=5000, seed=4, **FAST))
    assert not np.array_equal(a.q, c.q)


def test_boltzmann_exploration_runs(corridor):
    art = train_room_policy(corridor, "E", cfg=TrainConfig(steps=5000, exploration="boltzmann", temperature=0.5, **FAST))
    assert art.latent_value > 0.5


def test_unexplored_entry_state_raises(corridor):
    cfg = TrainConfig(steps=1, model_every=1, log_every=1, cert_cap=100)
    with pytest.raises(NoExplorationCoverage):
        train_room_policy(corridor, "E", cfg=cfg)
    art = train_room_policy(corridor, "E", cfg=TrainConfig(steps=1, model_every=1, log_every=1, cert_cap=100, smoothing=0.5))
    assert art.report.samples > 0


def test_training_rejects_mismatched_inputs(corridor):
    with pytest.raises(ModelError):
        train_room_policy(corridor, "N", cfg=TrainConfig(steps=10))
    with pytest.raises(ModelError):
        train_room_policy(corridor, "E", phi=Embedding.identity(3), cfg=TrainConfig(steps=10))


def test_spot_recertification_agrees(trained, guarded):
    art = trained
    assert art.report.gamma == art.config.gamma and art.report.epsilon == art.config.epsilon
    mdp = training_mdp(guarded.room, "E")
    source = TrajectorySource(mdp, lift_policy(art.phi, art.latent_policy), guarded.room.reset, seed=99)
    again = certify_online(source, art.latent, art.phi, art.config.epsilon, art.config.delta, art.config.gamma,
                           cap=art.config.cert_cap, raise_on_cap=False)
    # both runs estimate the same quantities under the frozen greedy policy
    assert abs(again.L_hat - art.report.L_hat) <= 2 * art.config.epsilon
    assert abs(again.xi_hat - art.report.xi_hat) <= 2 * art.config.epsilon


# ---- artifacts ------------------------------------------------------------


def test_artifact_round_trip(trained, tmp_path):
    path = tmp_path / "art.json"
    save_artifact(trained, str(path))
    back = load_artifact(str(path))
    assert back.key == trained.key
    assert np.array_equal(back.q, trained.q)
    assert np.array_equal(back.phi.classes, trained.phi.classes)
    assert np.array_equal(back.latent_policy.probs, trained.latent_policy.probs)
    assert back.report == trained.report
    assert back.config == trained.config


def test_artifact_schema_and_consistency(trained):
    data = trained.to_json()
    with pytest.raises(ModelError):
        TrainedRoomArtifact.from_json({**data, "schema": "9.0"})
    report = dict(data["report"], gamma=0.5)
    with pytest.raises(ModelError):
        TrainedRoomArtifact.from_json({**data, "report": report})


def test_curves_csv(trained, tmp_path):
    path = tmp_path / "curves.csv"
    trained.write_curves(str(path))
    rows = list(csv.DictReader(path.open()))
    assert [int(r["step"]) for r in rows] == [5000, 10000, 15000, 20000]
    assert all(0 <= float(r["success_rate"]) <= 1 for r in rows)


# ---- entrance learning ----------------------------------------------------


def _uniform_catalog(h):
    keys = {h.key(v, u) for v, u in h.graph.half_edges}
    return {k: Policy.uniform(h.rooms[k[0]].mdp) for k in keys}


def test_dirac_entrance_after_one_observation():
    gm = grid_map(1, 2, room_width=3, room_height=3, adversaries=0)
    h = gm.model
    est = learn_entrance(h, _uniform_catalog(h), {n: Embedding.identity(r.n_states) for n, r in h.rooms.items()}, 1)
    # without adversaries every entrance is a single state
    for (name, d), dist in est.entrances.items():
        assert est.counts[(name, d)] >= 1
        assert np.array_equal(dist, h.rooms[name].entrance[d])
    key = (h.room(h.v0).name, h.local_direction(h.v0, h.d0[1]))
    assert np.array_equal(est.entrances[key], h.initial_entrance())


def test_entrance_recovery():
    h = random_two_level_model(5)
    phi = {n: Embedding.identity(r.n_states) for n, r in h.rooms.items()}
    est = learn_entrance(h, _uniform_catalog(h), phi, 10_000, seed=1)
    checked = 0
    for (name, d), dist in est.entrances.items():
        if est.counts[(name, d)] >= 10_000:
            truth = h.rooms[name].entrance[d]
            assert 0.5 * np.abs(dist - truth).sum() < 0.02
            checked += 1
    assert checked >= 1


def test_unvisited_directions_are_flagged():
    gm = grid_map(1, 3, room_width=3, room_height=3, adversaries=0)
    h = gm.model
    phi = {n: Embedding.identity(r.n_states) for n, r in h.rooms.items()}
    est = learn_entrance(h, _uniform_catalog(h), phi, 5, horizon=1)
    assert len(est.entrances) == 1
    far = (h.room("r02").name, h.local_direction("r02", "r01"))
    assert far in est.unseen
    back = EntranceEstimate.from_json(json.loads(json.dumps(est.to_json())))
    assert back.unseen == est.unseen and back.counts == est.counts
    with pytest.raises(ModelError):
        learn_entrance(h, _uniform_catalog(h), phi, 0)
