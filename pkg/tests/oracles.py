"""Independent reference computations used as test oracles."""

import itertools

import numpy as np

from roomsynth.latent import lift_policy, transition_loss_exact
from roomsynth.mdp import ReachAvoidObjective, stationary_distribution, value_reach_avoid


def dense_rows(mdp):
    """(n_states, n_actions, n_states) array; disabled pairs are all-zero."""
    out = np.zeros((mdp.n_states, mdp.n_actions, mdp.n_states))
    for s in range(mdp.n_states):
        for a in mdp.actions_at(s):
            out[s, a] = mdp.row(s, a)
    return out


def linear_policy_values(p, good, bad, gamma):
    """Reach-avoid values of a batch of chains ``p`` (k, n, n) by direct linear solves."""
    n = p.shape[-1]
    free = ~(good | bad)
    sub = p[:, free][:, :, free]
    rhs = gamma * p[:, free][:, :, good].sum(axis=2)
    vals = np.zeros((p.shape[0], n))
    vals[:, good] = 1.0
    if free.any():
        vals[:, free] = np.linalg.solve(np.eye(free.sum()) - gamma * sub, rhs[..., None])[..., 0]
    return vals


def brute_force_optimum(mdp, good, bad, gamma, batch=20000):
    """Pointwise max of the values of every deterministic stationary policy."""
    good = good & ~bad
    rows = dense_rows(mdp)
    choices = [mdp.actions_at(s) for s in range(mdp.n_states)]
    best = np.full(mdp.n_states, -np.inf)
    it = itertools.product(*choices)
    idx = np.arange(mdp.n_states)
    while True:
        chunk = list(itertools.islice(it, batch))
        if not chunk:
            return best
        acts = np.asarray(chunk)
        p = rows[idx[None, :], acts]
        best = np.maximum(best, linear_policy_values(p, good, bad, gamma).max(axis=0))


def abstraction_gaps(inst, gamma, tol=1e-13):
    """Exact loss, reset mass, stationary-average gap and initial gap of an abstraction instance."""
    pi = lift_policy(inst.phi, inst.latent_policy)
    xi = stationary_distribution(inst.ground, pi)
    loss = transition_loss_exact(inst.ground, inst.latent, inst.phi, inst.latent_policy, xi)
    v = value_reach_avoid(inst.ground, pi, ReachAvoidObjective(inst.target, inst.bad, gamma), tol).values
    lat = inst.latent
    vb = value_reach_avoid(lat.mdp, inst.latent_policy, ReachAvoidObjective(lat.target, lat.bad, gamma), tol).values
    avg = float(xi @ np.abs(v - vb[inst.phi.classes]))
    init = abs(float(inst.ground.initial @ v - lat.mdp.initial @ vb))
    return loss, float(xi[inst.reset]), avg, init


def closed_bottom_sets(chain):
    """BSCCs by brute force: a state is bottom iff everything it reaches can reach it back."""
    n = chain.shape[0]
    adj = (chain.toarray() > 0).astype(int)
    reach = np.eye(n, dtype=int) | adj
    for _ in range(n):
        reach = ((reach @ reach) > 0).astype(int)
    comps = set()
    for s in range(n):
        fwd = np.flatnonzero(reach[s])
        if all(reach[t, s] for t in fwd):
            comps.add(tuple(int(t) for t in fwd))
    return sorted(comps)
