"""Slack of the single-room and lifted value-gap bounds over seeded instances.

Writes one CSV row per instance:

    python3 scripts/bound_sweeps.py --n 100 --out sweeps.csv
"""

import argparse
import csv
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "tests"))

from oracles import abstraction_gaps  # noqa: E402
from roomsynth.latent import value_gap_bounds  # noqa: E402
from roomsynth.random_models import random_abstraction, random_lifted_instance  # noqa: E402
from roomsynth.synthesis import (  # noqa: E402
    build_mdp_plan,
    build_succinct,
    entrance_loss,
    ground_oracle,
    latent_oracle,
    lifted_bound,
    plan_stationary,
    plan_value,
    planner_to_plan_policy,
    succinct_value,
    synthesize_planner,
)


def room_rows(n, gamma, seed):
    rng = np.random.default_rng(seed)
    for i in range(n):
        noise = 10 ** rng.uniform(-4, -1)
        inst = random_abstraction(int(rng.integers(2**31)), noise=noise)
        loss, xi_reset, avg_gap, init_gap = abstraction_gaps(inst, gamma)
        b = value_gap_bounds(loss, xi_reset, gamma)
        yield {"kind": "room", "instance": i, "noise": noise, "loss": loss, "gap": init_gap,
               "bound": b.init, "slack": b.init - init_gap}


def lifted_rows(n, gamma):
    for i in range(n):
        inst = random_lifted_instance(i, gamma)
        h = inst.model
        plan = build_mdp_plan(h, inst.catalog)
        planner, _ = synthesize_planner(build_succinct(h, ground_oracle(h, inst.catalog, gamma), gamma), h.targets)
        pol = planner_to_plan_policy(planner, plan)
        xi = plan_stationary(plan, pol)
        li = entrance_loss(plan, xi, inst.embeddings, inst.latent_entrances)
        lb = lifted_bound(plan, pol, li, inst.losses, gamma, xi)
        lsucc = build_succinct(h, latent_oracle(h, inst.latent_models, inst.latent_entrances, gamma), gamma)
        gap = abs(plan_value(plan, pol, gamma, 1e-12) - succinct_value(lsucc, planner, h.targets, 1e-12))
        yield {"kind": "lifted", "instance": i, "noise": inst.noise, "loss": max(inst.losses.values()),
               "gap": gap, "bound": lb.bound, "slack": lb.bound - gap}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="sweeps.csv")
    args = p.parse_args()
    rows = list(room_rows(args.n, args.gamma, args.seed)) + list(lifted_rows(args.n, args.gamma))
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for kind in ("room", "lifted"):
        sub = [r for r in rows if r["kind"] == kind]
        slack = min(r["slack"] for r in sub)
        useful = sum(r["bound"] <= 1 for r in sub)
        print(f"{kind:>7}: {len(sub)} instances, min slack {slack:.3e}, {useful} with bound <= 1")


if __name__ == "__main__":
    main()
