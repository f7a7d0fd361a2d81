"""Command-line pipeline: train, certify, synthesize, evaluate, demo-gridworld, validate.

Every command reads and writes JSON in the output directory.  Each report
carries a ``schema`` version and a separate ``meta`` block holding the
timestamp, so the rest of the file is byte-identical across reruns with
the same seed.

Exit codes: 0 success, 2 invalid model or artifact, 3 certification cap
reached, 4 synthesis infeasible (predicted value 0).
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import json
import logging
import math
import os
import sys
import time
import zlib
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace


from .errors import MissingArtifact, ModelError
from .gridworld import GridRoom, GridRoomConfig, build_grid_room, grid_map
from .latent import REPORT_SCHEMA, PacReport, TrajectorySource, certify_online
from .synthesis import (
    LatentRoomModel,
    Planner,
    TwoLevelController,
    build_mdp_plan,
    build_succinct,
    entrance_loss,
    execute_controller,
    latent_oracle,
    lifted_bound,
    plan_stationary,
    plan_value,
    planner_to_plan_policy,
    synthesize_planner,
)
from .trainer import (
    EntranceEstimate,
    TrainConfig,
    TrainedRoomArtifact,
    default_embedding,
    learn_entrance,
    train_room_policy,
)
from .twolevel import TwoLevelModel, training_mdp, validate

log = logging.getLogger("roomsynth")

EXIT_OK, EXIT_INVALID, EXIT_CAP, EXIT_INFEASIBLE = 0, 2, 3, 4

MODEL_FILE = "model.json"
ARTIFACT_DIR = "artifacts"
ENTRANCE_FILE = "entrances.json"
CERT_FILE = "certificates.json"
PLANNER_FILE = "planner.json"
EVAL_FILE = "evaluation.json"


@dataclass(frozen=True)
class PipelineConfig:
    model: str
    out: str
    gamma: float = 0.9
    train: TrainConfig = field(default_factory=TrainConfig)
    epsilon: float = 0.05
    delta: float = 0.05
    cert_cap: int = 200_000
    episodes: int = 10_000
    horizon: int | None = None
    entrance_rollouts: int = 2000
    seed: int = 0
    jobs: int = 1

    def validate(self) -> None:
        if not (0 < self.gamma < 1):
            raise ModelError("gamma must lie in (0, 1)")
        if self.episodes < 1 or self.entrance_rollouts < 1:
            raise ModelError("episodes and entrance rollouts must be at least 1")
        if not (0 < self.epsilon < 1) or not (0 < self.delta < 1):
            raise ModelError("epsilon and delta must lie in (0, 1)")

    @property
    def step_budget(self) -> int:
        """Evaluation horizon; defaults to the effective horizon ceil(1 / (1 - gamma))."""
        return self.horizon if self.horizon is not None else math.ceil(1 / (1 - self.gamma) - 1e-9)


# ---------------------------------------------------------------------------
# Files


def _write(path: str, payload: dict) -> None:
    doc = {"schema": REPORT_SCHEMA, **payload, "meta": {"written_at": time.strftime("%Y-%m-%dT%H:%M:%S")}}
    with open(path, "w") as f:
        json.dump(_finite(doc), f, sort_keys=True, indent=1)


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    return x


def _read(path: str, producer: str) -> dict:
    if not os.path.exists(path):
        raise MissingArtifact(f"{path} not found; run `roomsynth {producer}` first")
    with open(path) as f:
        doc = json.load(f)
    version = str(doc.get("schema", ""))
    if version.split(".")[0] != REPORT_SCHEMA.split(".")[0]:
        raise ModelError(f"{path}: unsupported schema version {version!r}")
    return doc


@dataclass(frozen=True, eq=False)
class LoadedModel:
    h: TwoLevelModel
    grid: Mapping[str, GridRoom] | None


def save_model_file(path: str, h: TwoLevelModel, configs: Mapping[str, GridRoomConfig] | None = None) -> None:
    payload = {"model": h.to_json()}
    if configs is not None:
        payload["grid"] = {c.name: c.to_json() for c in configs.values()}
    _write(path, payload)


def load_model_file(path: str) -> LoadedModel:
    doc = _read(path, "demo-gridworld")
    h = TwoLevelModel.from_json(doc["model"])
    grid = None
    if "grid" in doc:
        grid = {name: build_grid_room(GridRoomConfig.from_json(c)) for name, c in doc["grid"].items()}
    return LoadedModel(h, grid)


def _artifact_path(out: str, key: tuple[str, str], ext: str = "json") -> str:
    return os.path.join(out, ARTIFACT_DIR, f"{key[0]}__{key[1]}.{ext}")


def _keys(h: TwoLevelModel) -> list[tuple[str, str]]:
    return sorted((name, d) for name, room in h.rooms.items() for d in room.directions)


def load_artifacts(cfg: PipelineConfig, h: TwoLevelModel) -> dict[tuple[str, str], TrainedRoomArtifact]:
    out = {}
    for key in _keys(h):
        doc = _read(_artifact_path(cfg.out, key), "train")
        out[key] = TrainedRoomArtifact.from_json(doc["artifact"])
    return out


# ---------------------------------------------------------------------------
# Commands


def _key_seed(seed: int, key: tuple[str, str]) -> int:
    return (seed * 1_000_003 + zlib.crc32(f"{key[0]}/{key[1]}".encode())) % (2**31)


def _train_one(args) -> TrainedRoomArtifact:
    room, direction, tcfg = args
    return train_room_policy(room, direction, default_embedding(room), tcfg)


def cmd_train(cfg: PipelineConfig) -> dict[tuple[str, str], TrainedRoomArtifact]:
    """Train every (room, direction), then learn latent entrances under a random planner."""
    cfg.validate()
    loaded = load_model_file(cfg.model)
    h = loaded.h
    os.makedirs(os.path.join(cfg.out, ARTIFACT_DIR), exist_ok=True)
    jobs = []
    for key in _keys(h):
        room = loaded.grid[key[0]] if loaded.grid else h.rooms[key[0]]
        tcfg = replace(
            cfg.train, gamma=cfg.gamma, epsilon=cfg.epsilon, delta=cfg.delta,
            cert_cap=cfg.cert_cap, seed=_key_seed(cfg.seed, key),
        )
        jobs.append((room, key[1], tcfg))
    if cfg.jobs > 1:
        with cf.ProcessPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]
    arts = {}
    for art in results:
        arts[art.key] = art
        _write(_artifact_path(cfg.out, art.key), {"artifact": art.to_json()})
        art.write_curves(_artifact_path(cfg.out, art.key, "csv"))
        log.info("trained %s/%s: latent value %.4f", art.room, art.direction, art.latent_value)
    embs = {name: arts[next(k for k in arts if k[0] == name)].phi for name in h.rooms}
    catalog = {k: a.ground_policy() for k, a in arts.items()}
    ent = learn_entrance(h, catalog, embs, cfg.entrance_rollouts, seed=cfg.seed, horizon=max(cfg.step_budget, 100))
    _write(os.path.join(cfg.out, ENTRANCE_FILE), {"entrances": ent.to_json()})
    return arts


def cmd_certify(cfg: PipelineConfig) -> dict[tuple[str, str], PacReport]:
    """Fresh certificates for the trained greedy policies at the requested (epsilon, delta)."""
    cfg.validate()
    loaded = load_model_file(cfg.model)
    h = loaded.h
    arts = load_artifacts(cfg, h)
    reports = {}
    for key, art in arts.items():
        room = h.rooms[key[0]]
        source = TrajectorySource(
            training_mdp(room, key[1]), art.ground_policy(), room.reset, seed=_key_seed(cfg.seed + 1, key)
        )
        reports[key] = certify_online(
            source, art.latent, art.phi, cfg.epsilon, cfg.delta, cfg.gamma, cap=cfg.cert_cap, raise_on_cap=False
        )
    _write(
        os.path.join(cfg.out, CERT_FILE),
        {"certificates": [{"room": k[0], "direction": k[1], **r.to_json()} for k, r in sorted(reports.items())]},
    )
    return reports


def _models(arts) -> dict[tuple[str, str], LatentRoomModel]:
    return {k: LatentRoomModel(a.latent, a.latent_policy, a.phi) for k, a in arts.items()}


def _entrances(cfg: PipelineConfig) -> EntranceEstimate:
    return EntranceEstimate.from_json(_read(os.path.join(cfg.out, ENTRANCE_FILE), "train")["entrances"])


def cmd_synthesize(cfg: PipelineConfig) -> tuple[Planner, float]:
    """Planner maximizing the latent succinct value, with its predicted value."""
    cfg.validate()
    h = load_model_file(cfg.model).h
    arts = load_artifacts(cfg, h)
    ent = _entrances(cfg)
    succ = build_succinct(h, latent_oracle(h, _models(arts), ent.entrances, cfg.gamma), cfg.gamma)
    planner, value = synthesize_planner(succ, h.targets)
    _write(
        os.path.join(cfg.out, PLANNER_FILE),
        {"planner": planner.to_json(), "predicted_value": value, "gamma": cfg.gamma, "succinct": succ.report()},
    )
    return planner, value


@dataclass(frozen=True)
class EvaluationReport:
    """Empirical and predicted values of the synthesized controller.

    ``avg_return`` is the fraction of episodes reaching a target within the
    step budget; ``avg_value`` the mean of gamma^(hitting time).
    """

    avg_return: float
    avg_return_se: float
    avg_value: float
    avg_value_se: float
    latent_value: float
    plan_value: float
    baseline_return: float
    baseline_return_se: float
    baseline_value: float
    episodes: int
    step_budget: int
    unbounded_return: float
    baseline_unbounded_return: float
    lifted_bound: dict
    pac_table: list[dict]

    def to_json(self) -> dict:
        return asdict(self)

    @property
    def within_bound(self) -> bool:
        b = self.lifted_bound["bound"]
        return isinstance(b, float) and abs(self.latent_value - self.avg_value) <= b


def cmd_evaluate(cfg: PipelineConfig) -> EvaluationReport:
    """Roll out the synthesized controller and a uniformly random planner on the same seeds."""
    cfg.validate()
    h = load_model_file(cfg.model).h
    arts = load_artifacts(cfg, h)
    pdoc = _read(os.path.join(cfg.out, PLANNER_FILE), "synthesize")
    planner = Planner.from_json(pdoc["planner"])
    latent_value = float(pdoc["predicted_value"])
    ent = _entrances(cfg)
    catalog = {k: a.ground_policy() for k, a in arts.items()}
    budget = cfg.step_budget
    long = max(100 * budget, 1000)
    ctrl = execute_controller(h, TwoLevelController(planner, catalog), cfg.seed, cfg.episodes, long, cfg.gamma)
    base = execute_controller(h, TwoLevelController(None, catalog), cfg.seed, cfg.episodes, long, cfg.gamma)

    def within(stats):
        x = (stats.success & (stats.steps <= budget)).astype(float)
        return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0

    ret, ret_se = within(ctrl)
    bret, bret_se = within(base)
    plan = build_mdp_plan(h, catalog)
    pol = planner_to_plan_policy(planner, plan)
    exact = plan_value(plan, pol, cfg.gamma)
    xi = plan_stationary(plan, pol)
    embs = {k[0]: a.phi for k, a in arts.items()}
    li = entrance_loss(plan, xi, embs, ent.entrances)
    losses = {k: a.report.L_hat for k, a in arts.items()}
    lb = lifted_bound(plan, pol, li, losses, cfg.gamma, xi).to_json()
    table = [
        {
            "room": k[0],
            "direction": k[1],
            "latent_value": a.latent_value,
            "L_hat": a.report.L_hat,
            "xi_hat": a.report.xi_hat,
            "samples": a.report.samples,
            "terminated_by": a.report.terminated_by,
            "avg_bound": a.report.avg_bound,
            "init_bound": a.report.init_bound,
        }
        for k, a in sorted(arts.items())
    ]
    report = EvaluationReport(
        ret, ret_se, ctrl.mean_discounted, ctrl.stderr("discounted"), latent_value, exact,
        bret, bret_se, base.mean_discounted, cfg.episodes, budget,
        ctrl.success_rate, base.success_rate, lb, table,
    )
    _write(os.path.join(cfg.out, EVAL_FILE), {"evaluation": report.to_json(), "within_bound": report.within_bound})
    return report


def cmd_demo_gridworld(
    cfg: PipelineConfig,
    rows: int = 2,
    cols: int = 2,
    size: int = 5,
    adversaries: int = 1,
    lives: int = 1,
    obstacles: int = 0,
) -> EvaluationReport:
    """Generate a grid map into ``cfg.out`` and run the whole pipeline on it."""
    os.makedirs(cfg.out, exist_ok=True)
    gm = grid_map(rows, cols, size, size, adversaries, lives=lives, obstacles=obstacles, seed=cfg.seed)
    path = os.path.join(cfg.out, MODEL_FILE)
    save_model_file(path, gm.model, gm.configs)
    cfg = replace(cfg, model=path)
    cmd_train(cfg)
    cmd_synthesize(cfg)
    return cmd_evaluate(cfg)


def cmd_validate(cfg: PipelineConfig) -> TwoLevelModel:
    h = load_model_file(cfg.model).h
    validate(h)
    return h


# ---------------------------------------------------------------------------
# Argument parsing


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roomsynth", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model_required=True):
        if model_required:
            sp.add_argument("--model", required=True, help="model JSON")
        sp.add_argument("--out", default="roomsynth_out", help="output directory")
        sp.add_argument("--gamma", type=float, default=0.9)
        sp.add_argument("--epsilon", type=float, default=0.05)
        sp.add_argument("--delta", type=float, default=0.05)
        sp.add_argument("--episodes", type=int, default=10_000, help="evaluation rollouts")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--steps", type=int, default=200_000, help="training steps per (room, direction)")
        sp.add_argument("--cap", type=int, default=200_000, help="certification sample cap")
        sp.add_argument("--horizon", type=int, default=None, help="evaluation step budget")
        sp.add_argument("--rollouts", type=int, default=2000, help="entrance-learning rollouts")
        sp.add_argument("-v", "--verbose", action="store_true")

    for name in ("train", "certify", "synthesize", "evaluate", "validate"):
        common(sub.add_parser(name))
    demo = sub.add_parser("demo-gridworld")
    common(demo, model_required=False)
    demo.add_argument("--rows", type=int, default=2)
    demo.add_argument("--cols", type=int, default=2)
    demo.add_argument("--size", type=int, default=5)
    demo.add_argument("--adversaries", type=int, default=1)
    demo.add_argument("--lives", type=int, default=1)
    demo.add_argument("--obstacles", type=int, default=0)
    return p


def _config(args) -> PipelineConfig:
    return PipelineConfig(
        model=getattr(args, "model", "") or os.path.join(args.out, MODEL_FILE),
        out=args.out,
        gamma=args.gamma,
        train=TrainConfig(steps=args.steps, gamma=args.gamma),
        epsilon=args.epsilon,
        delta=args.delta,
        cert_cap=args.cap,
        episodes=args.episodes,
        horizon=args.horizon,
        entrance_rollouts=args.rollouts,
        seed=args.seed,
        jobs=args.jobs,
    )


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = _config(args)
    try:
        if args.command == "validate":
            h = cmd_validate(cfg)
            print(f"valid: {len(h.graph.vertices)} vertices, {len(h.rooms)} rooms")
            return EXIT_OK
        if args.command == "train":
            arts = cmd_train(cfg)
            for k, a in sorted(arts.items()):
                print(f"{k[0]}/{k[1]}: latent value {a.latent_value:.4f}, certificate {a.report.terminated_by}")
            return EXIT_OK
        if args.command == "certify":
            reps = cmd_certify(cfg)
            capped = [k for k, r in reps.items() if r.terminated_by == "cap"]
            for k, r in sorted(reps.items()):
                print(f"{k[0]}/{k[1]}: L_hat {r.L_hat:.4f} xi_hat {r.xi_hat:.4f} n {r.samples} ({r.terminated_by})")
            return EXIT_CAP if capped else EXIT_OK
        if args.command == "synthesize":
            _, value = cmd_synthesize(cfg)
            print(f"predicted value {value:.6f}")
            return EXIT_INFEASIBLE if value <= 0 else EXIT_OK
        if args.command in ("evaluate", "demo-gridworld"):
            if args.command == "evaluate":
                rep = cmd_evaluate(cfg)
            else:
                rep = cmd_demo_gridworld(
                    cfg, args.rows, args.cols, args.size, args.adversaries, args.lives, args.obstacles
                )
            _summary(rep)
            return EXIT_OK
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_INVALID


def _summary(rep: EvaluationReport) -> None:
    lb = rep.lifted_bound
    print(f"avg_return    {rep.avg_return:.4f} ± {rep.avg_return_se:.4f} (within {rep.step_budget} steps)")
    print(f"avg_value     {rep.avg_value:.4f} ± {rep.avg_value_se:.4f}")
    print(f"latent_value  {rep.latent_value:.4f}   plan value {rep.plan_value:.4f}")
    print(f"baseline      return {rep.baseline_return:.4f} ± {rep.baseline_return_se:.4f}, value {rep.baseline_value:.4f}")
    print(f"lifted bound  {lb['bound']} ({'vacuous' if lb['vacuous'] else 'non-vacuous'})")
    capped = sum(r["terminated_by"] == "cap" for r in rep.pac_table)
    if capped:
        print(f"note: {capped} certificate(s) stopped at the sample cap")


if __name__ == "__main__":
    sys.exit(main())
