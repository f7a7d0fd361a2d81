"""Sparse finite MDPs and the numerical primitives used everywhere else.

States and actions are dense integer indices.  Transition rows live in a
CSR-like layout over enabled (state, action) pairs, so a state may enable
only a subset of the actions.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .errors import (
    ModelError,
    NonStochasticRow,
    NotErgodic,
    PolicyMismatch,
    ToleranceNotPositive,
    UnknownState,
)

ROW_TOL = 1e-12
RENORMALIZE_TOL = 1e-9
TIE_TOL = 1e-12


def _check_distribution(values: np.ndarray, what: str) -> np.ndarray:
    if np.any(values < -RENORMALIZE_TOL) or np.any(values > 1 + RENORMALIZE_TOL):
        raise NonStochasticRow(f"{what}: entries outside [0, 1]")
    values = np.clip(values, 0.0, 1.0)
    total = values.sum()
    if abs(total - 1.0) > RENORMALIZE_TOL:
        raise NonStochasticRow(f"{what}: sums to {total!r}")
    return values / total


@dataclass(frozen=True, eq=False)
class Mdp:
    """Finite MDP with sparse rows over enabled (state, action) pairs.

    ``pair_state``/``pair_action`` list the enabled pairs sorted by
    (state, action); pair ``k`` owns ``dest[indptr[k]:indptr[k+1]]``.
    """

    n_states: int
    n_actions: int
    pair_state: np.ndarray
    pair_action: np.ndarray
    indptr: np.ndarray
    dest: np.ndarray
    prob: np.ndarray
    initial: np.ndarray

    # ---- construction -------------------------------------------------
    @classmethod
    def from_rows(
        cls,
        n_states: int,
        n_actions: int,
        rows: Mapping[tuple[int, int], Any] | Iterable[tuple[int, int, Any]],
        initial: Mapping[int, float] | Iterable[tuple[int, float]] | np.ndarray,
    ) -> "Mdp":
        """Build from ``{(s, a): [(dest, p), ...]}`` (or a dense row vector)."""
        items = rows.items() if isinstance(rows, Mapping) else (((s, a), r) for s, a, r in rows)
        collected: dict[tuple[int, int], dict[int, float]] = {}
        for (s, a), row in items:
            s, a = int(s), int(a)
            if not (0 <= s < n_states):
                raise UnknownState(f"transition source {s} out of range")
            if not (0 <= a < n_actions):
                raise ModelError(f"action {a} out of range at state {s}")
            if isinstance(row, np.ndarray) and row.ndim == 1 and row.shape[0] == n_states:
                pairs = [(int(j), float(row[j])) for j in np.flatnonzero(row)]
            elif isinstance(row, Mapping):
                pairs = [(int(j), float(p)) for j, p in row.items()]
            else:
                pairs = [(int(j), float(p)) for j, p in row]
            merged = collected.setdefault((s, a), {})
            for j, p in pairs:
                if not (0 <= j < n_states):
                    raise UnknownState(f"destination {j} out of range in row ({s}, {a})")
                merged[j] = merged.get(j, 0.0) + p
        keys = sorted(collected)
        pair_state = np.array([k[0] for k in keys], dtype=np.int64)
        pair_action = np.array([k[1] for k in keys], dtype=np.int64)
        indptr = [0]
        dest: list[int] = []
        prob: list[float] = []
        for k in keys:
            row = collected[k]
            js = sorted(j for j, p in row.items() if p != 0.0)
            dest.extend(js)
            prob.extend(row[j] for j in js)
            indptr.append(len(dest))
        return cls.from_arrays(
            n_states,
            n_actions,
            pair_state,
            pair_action,
            np.array(indptr, dtype=np.int64),
            np.array(dest, dtype=np.int64),
            np.array(prob, dtype=np.float64),
            _dense_initial(initial, n_states),
        )

    @classmethod
    def from_arrays(
        cls,
        n_states: int,
        n_actions: int,
        pair_state: np.ndarray,
        pair_action: np.ndarray,
        indptr: np.ndarray,
        dest: np.ndarray,
        prob: np.ndarray,
        initial: np.ndarray,
        validate: bool = True,
    ) -> "Mdp":
        pair_state = np.asarray(pair_state, dtype=np.int64)
        pair_action = np.asarray(pair_action, dtype=np.int64)
        indptr = np.asarray(indptr, dtype=np.int64)
        dest = np.asarray(dest, dtype=np.int64)
        prob = np.asarray(prob, dtype=np.float64).copy()
        initial = np.asarray(initial, dtype=np.float64).copy()
        if validate:
            order = np.lexsort((pair_action, pair_state))
            if not np.array_equal(order, np.arange(len(order))):
                raise ModelError("pairs must be sorted by (state, action)")
            if len(pair_state) and (
                np.any(np.diff(pair_state * n_actions + pair_action) == 0)
            ):
                raise ModelError("duplicate (state, action) pair")
            if np.any((pair_action < 0) | (pair_action >= n_actions)):
                raise ModelError("action index out of range")
            if np.any((dest < 0) | (dest >= n_states)):
                raise UnknownState("destination index out of range")
            missing = np.setdiff1d(np.arange(n_states), pair_state)
            if missing.size:
                raise ModelError(f"state {int(missing[0])} has no enabled action")
            if np.any(prob < -RENORMALIZE_TOL) or np.any(prob > 1 + RENORMALIZE_TOL):
                bad = int(np.flatnonzero((prob < -RENORMALIZE_TOL) | (prob > 1 + RENORMALIZE_TOL))[0])
                k = int(np.searchsorted(indptr, bad, side="right") - 1)
                raise NonStochasticRow(
                    f"row ({int(pair_state[k])}, {int(pair_action[k])}) has entry outside [0, 1]"
                )
            empty = np.flatnonzero(indptr[:-1] == indptr[1:])
            if empty.size:
                k = int(empty[0])
                raise NonStochasticRow(
                    f"row ({int(pair_state[k])}, {int(pair_action[k])}) is empty"
                )
            sums = np.add.reduceat(prob, indptr[:-1]) if len(prob) else np.zeros(0)
            off = np.abs(sums - 1.0) > RENORMALIZE_TOL
            if np.any(off):
                k = int(np.flatnonzero(off)[0])
                raise NonStochasticRow(
                    f"row ({int(pair_state[k])}, {int(pair_action[k])}) sums to {sums[k]!r}"
                )
            prob = np.clip(prob, 0.0, 1.0)
            prob /= np.repeat(sums, np.diff(indptr))
            if initial.shape != (n_states,):
                raise ModelError("initial distribution has the wrong length")
            initial = _check_distribution(initial, "initial distribution")
        return cls(n_states, n_actions, pair_state, pair_action, indptr, dest, prob, initial)

    # ---- derived views ------------------------------------------------
    @property
    def n_pairs(self) -> int:
        return len(self.pair_state)

    @cached_property
    def pair_id(self) -> np.ndarray:
        """(n_states, n_actions) array of pair indices, -1 where disabled."""
        table = np.full((self.n_states, self.n_actions), -1, dtype=np.int64)
        table[self.pair_state, self.pair_action] = np.arange(self.n_pairs)
        return table

    @cached_property
    def enabled(self) -> np.ndarray:
        return self.pair_id >= 0

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        """(n_pairs, n_states) transition matrix."""
        return sp.csr_matrix(
            (self.prob, self.dest, self.indptr), shape=(self.n_pairs, self.n_states)
        )

    def row(self, state: int, action: int) -> np.ndarray:
        """Dense successor distribution of an enabled pair."""
        k = self.pair_id[state, action]
        if k < 0:
            raise ModelError(f"action {action} not enabled at state {state}")
        out = np.zeros(self.n_states)
        lo, hi = self.indptr[k], self.indptr[k + 1]
        out[self.dest[lo:hi]] = self.prob[lo:hi]
        return out

    def actions_at(self, state: int) -> np.ndarray:
        return np.flatnonzero(self.enabled[state])

    def chain(self, policy: "Policy") -> sp.csr_matrix:
        """State-to-state matrix of the chain induced by ``policy``."""
        policy.check(self)
        w = policy.probs[self.pair_state, self.pair_action]
        mix = sp.csr_matrix(
            (w, (self.pair_state, np.arange(self.n_pairs))), shape=(self.n_states, self.n_pairs)
        )
        out = (mix @ self.matrix).tocsr()
        out.eliminate_zeros()
        return out

    # ---- serialization -----------------------------------------------
    def to_json(self) -> dict:
        transitions = []
        for k in range(self.n_pairs):
            lo, hi = self.indptr[k], self.indptr[k + 1]
            transitions.append(
                [
                    int(self.pair_state[k]),
                    int(self.pair_action[k]),
                    [[int(j), float(p)] for j, p in zip(self.dest[lo:hi], self.prob[lo:hi])],
                ]
            )
        return {
            "states": self.n_states,
            "actions": self.n_actions,
            "transitions": transitions,
            "initial": [[int(s), float(p)] for s, p in enumerate(self.initial) if p > 0],
        }

    @classmethod
    def from_json(cls, data: dict | str) -> "Mdp":
        if isinstance(data, str):
            data = json.loads(data)
        try:
            n, m = int(data["states"]), int(data["actions"])
            rows = [(int(s), int(a), [(int(j), float(p)) for j, p in row]) for s, a, row in data["transitions"]]
            initial = [(int(s), float(p)) for s, p in data["initial"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelError(f"malformed MDP JSON: {exc}") from exc
        return cls.from_rows(n, m, rows, initial)


def _dense_initial(initial, n_states: int) -> np.ndarray:
    if isinstance(initial, np.ndarray):
        return initial.astype(np.float64)
    out = np.zeros(n_states)
    items = initial.items() if isinstance(initial, Mapping) else initial
    for s, p in items:
        s = int(s)
        if not (0 <= s < n_states):
            raise UnknownState(f"initial state {s} out of range")
        out[s] += float(p)
    return out


# ---------------------------------------------------------------------------
# Policies and objectives


@dataclass(frozen=True, eq=False)
class Policy:
    """Stationary policy as an (n_states, n_actions) probability table."""

    probs: np.ndarray
    deterministic: bool = False

    @property
    def kind(self) -> str:
        return "stationary-deterministic" if self.deterministic else "stationary-stochastic"

    @classmethod
    def from_actions(cls, actions: Iterable[int], n_actions: int) -> "Policy":
        actions = np.asarray(list(actions), dtype=np.int64)
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs, True)

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "Policy":
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 2:
            raise PolicyMismatch("policy table must be two-dimensional")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > RENORMALIZE_TOL):
            raise PolicyMismatch("policy rows must be distributions")
        probs = probs / probs.sum(axis=1, keepdims=True)
        det = bool(np.all(np.isclose(probs.max(axis=1), 1.0, atol=0, rtol=0)))
        return cls(probs, det)

    @classmethod
    def uniform(cls, mdp: Mdp) -> "Policy":
        probs = mdp.enabled.astype(np.float64)
        probs /= probs.sum(axis=1, keepdims=True)
        return cls(probs, False)

    @property
    def actions(self) -> np.ndarray:
        """Chosen action per state; only meaningful for deterministic policies."""
        return np.argmax(self.probs, axis=1)

    def check(self, mdp: Mdp) -> None:
        if self.probs.shape != (mdp.n_states, mdp.n_actions):
            raise PolicyMismatch(
                f"policy shape {self.probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
            )
        stray = (self.probs > 0) & ~mdp.enabled
        if np.any(stray):
            s, a = np.argwhere(stray)[0]
            raise PolicyMismatch(f"policy puts mass on disabled action {a} at state {s}")


@dataclass(frozen=True)
class ReachAvoidObjective:
    """Reach ``target`` while avoiding ``avoid``, discounted by ``discount``.

    States in both sets count as avoid states.
    """

    target: frozenset[int]
    avoid: frozenset[int]
    discount: float

    def __init__(self, target: Iterable[int], avoid: Iterable[int], discount: float):
        object.__setattr__(self, "target", frozenset(int(s) for s in target))
        object.__setattr__(self, "avoid", frozenset(int(s) for s in avoid))
        object.__setattr__(self, "discount", float(discount))
        if not (0.0 < self.discount < 1.0):
            raise ModelError(f"discount must lie strictly inside (0, 1), got {discount}")

    def masks(self, n_states: int) -> tuple[np.ndarray, np.ndarray]:
        for s in self.target | self.avoid:
            if not (0 <= s < n_states):
                raise UnknownState(f"objective state {s} out of range")
        bad = np.zeros(n_states, dtype=bool)
        bad[list(self.avoid)] = True
        good = np.zeros(n_states, dtype=bool)
        good[list(self.target)] = True
        return good & ~bad, bad


@dataclass(frozen=True, eq=False)
class ValueVector:
    values: np.ndarray
    gamma: float
    tol: float
    iterations: int
    converged: bool
    residuals: tuple[float, ...] = field(default=(), repr=False)

    def __getitem__(self, s):
        return self.values[s]

    def initial_value(self, initial: np.ndarray) -> float:
        return float(initial @ self.values)


def iteration_cap(contraction: float) -> int:
    """Safety cap ``ceil(log(1e-12)/log(c)) + 1000`` for a contraction factor ``c``."""
    if contraction <= 0.0:
        return 1001
    if contraction >= 1.0:
        raise ModelError("contraction factor must be below 1")
    return math.ceil(math.log(1e-12) / math.log(contraction)) + 1000


def _check_tol(tol: float) -> None:
    if not (tol > 0):
        raise ToleranceNotPositive(f"tolerance must be positive, got {tol}")


def _reach_iterate(
    step: Callable[[np.ndarray], np.ndarray],
    good: np.ndarray,
    bad: np.ndarray,
    gamma: float,
    tol: float,
    cap: int,
) -> ValueVector:
    v = np.zeros(len(good))
    v[good] = 1.0
    residuals = []
    converged = False
    it = 0
    while it < cap:
        it += 1
        new = gamma * step(v)
        new[good] = 1.0
        new[bad] = 0.0
        res = float(np.max(np.abs(new - v))) if len(v) else 0.0
        v = new
        residuals.append(res)
        if res < tol:
            converged = True
            break
    return ValueVector(np.clip(v, 0.0, 1.0), gamma, tol, it, converged, tuple(residuals))


def value_reach_avoid(
    mdp: Mdp, policy: Policy, obj: ReachAvoidObjective, tol: float = 1e-9
) -> ValueVector:
    """Value of ``policy`` for the reach-avoid objective (three-case Bellman fixed point)."""
    _check_tol(tol)
    good, bad = obj.masks(mdp.n_states)
    chain = mdp.chain(policy)
    return _reach_iterate(lambda v: chain @ v, good, bad, obj.discount, tol, iteration_cap(obj.discount))


def value_on_masks(
    mdp: Mdp,
    policy: Policy,
    good: np.ndarray,
    bad: np.ndarray,
    gamma: float,
    tol: float = 1e-9,
    cap: int | None = None,
) -> ValueVector:
    """Policy evaluation on explicit target/avoid masks.

    ``gamma == 1`` is allowed when the chain leaks mass geometrically; the
    caller then supplies ``cap``.
    """
    _check_tol(tol)
    if cap is None:
        cap = iteration_cap(gamma)
    chain = mdp.chain(policy)
    return _reach_iterate(lambda v: chain @ v, good & ~bad, bad, gamma, tol, cap)


def _greedy(mdp: Mdp, q_pairs: np.ndarray, good: np.ndarray, bad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q = np.full((mdp.n_states, mdp.n_actions), -np.inf)
    q[mdp.pair_state, mdp.pair_action] = q_pairs
    best = q.max(axis=1)
    choice = np.argmax(q >= (best - TIE_TOL)[:, None], axis=1)
    first_enabled = np.argmax(mdp.enabled, axis=1)
    fixed = good | bad
    choice[fixed] = first_enabled[fixed]
    return best, choice


def solve_optimal(
    mdp: Mdp,
    good: np.ndarray,
    bad: np.ndarray,
    gamma: float,
    tol: float,
    cap: int,
) -> tuple[ValueVector, Policy]:
    """Max-variant reach-avoid value iteration on explicit masks.

    Also accepts ``gamma == 1`` when the caller guarantees contraction through
    leakage (the succinct model), in which case ``cap`` must be supplied.
    """
    _check_tol(tol)
    matrix = mdp.matrix

    def step(v):
        best, _ = _greedy(mdp, matrix @ v, good, bad)
        return best

    vv = _reach_iterate(step, good, bad, gamma, tol, cap)
    _, choice = _greedy(mdp, matrix @ vv.values, good, bad)
    return vv, Policy.from_actions(choice, mdp.n_actions)


def optimal_value_and_policy(
    mdp: Mdp, obj: ReachAvoidObjective, tol: float = 1e-9
) -> tuple[ValueVector, Policy]:
    """Optimal values and a deterministic optimal policy (lowest index on ties)."""
    good, bad = obj.masks(mdp.n_states)
    return solve_optimal(mdp, good, bad, obj.discount, tol, iteration_cap(obj.discount))


# ---------------------------------------------------------------------------
# Distributions over states


def _check_state(mdp: Mdp, s: int) -> int:
    s = int(s)
    if not (0 <= s < mdp.n_states):
        raise UnknownState(f"state {s} out of range")
    return s


def transient_measure(mdp: Mdp, policy: Policy, source: int, n: int) -> np.ndarray:
    """Distribution over states after ``n`` steps from ``source``."""
    source = _check_state(mdp, source)
    if n < 0:
        raise ValueError("n must be nonnegative")
    chain_t = mdp.chain(policy).T.tocsr()
    x = np.zeros(mdp.n_states)
    x[source] = 1.0
    for _ in range(n):
        x = chain_t @ x
    return x


def reachable(chain: sp.csr_matrix, sources: Iterable[int]) -> np.ndarray:
    """Boolean mask of states reachable (in >= 0 steps) from ``sources``."""
    n = chain.shape[0]
    seen = np.zeros(n, dtype=bool)
    frontier = np.unique(np.asarray(list(sources), dtype=np.int64))
    seen[frontier] = True
    indptr, indices = chain.indptr, chain.indices
    while frontier.size:
        nxt = np.concatenate([indices[indptr[s]:indptr[s + 1]] for s in frontier]) if frontier.size else frontier
        nxt = np.unique(nxt)
        nxt = nxt[~seen[nxt]]
        seen[nxt] = True
        frontier = nxt
    return seen


def bottom_components(chain: sp.csr_matrix) -> list[tuple[int, ...]]:
    """BSCCs of the support graph of ``chain``, sorted by smallest member."""
    n = chain.shape[0]
    if n == 0:
        return []
    _, labels = connected_components(chain, directed=True, connection="strong")
    coo = chain.tocoo()
    leaving = labels[coo.row] != labels[coo.col]
    not_bottom = np.zeros(labels.max() + 1, dtype=bool)
    not_bottom[labels[coo.row[leaving]]] = True
    comps = []
    for lab in np.flatnonzero(~not_bottom):
        members = np.flatnonzero(labels == lab)
        comps.append(tuple(int(x) for x in members))
    comps.sort(key=lambda c: c[0])
    return comps


def bsccs(mdp: Mdp, policy: Policy) -> list[tuple[int, ...]]:
    """Bottom strongly connected components of the chain induced by ``policy``."""
    return bottom_components(mdp.chain(policy))


def chain_period(chain: sp.csr_matrix, members: Iterable[int]) -> int:
    """Period of the (strongly connected) sub-chain on ``members``."""
    members = list(members)
    inside = np.zeros(chain.shape[0], dtype=bool)
    inside[members] = True
    level = {members[0]: 0}
    queue = [members[0]]
    g = 0
    indptr, indices = chain.indptr, chain.indices
    head = 0
    while head < len(queue):
        u = queue[head]
        head += 1
        for w in indices[indptr[u]:indptr[u + 1]]:
            w = int(w)
            if not inside[w]:
                continue
            if w not in level:
                level[w] = level[u] + 1
                queue.append(w)
            else:
                g = math.gcd(g, level[u] + 1 - level[w])
    return abs(g) if g else 1


def stationary_of_chain(
    chain: sp.csr_matrix,
    initial: np.ndarray,
    tol: float = 1e-12,
    require_aperiodic: bool = True,
    max_iter: int = 10_000,
) -> np.ndarray:
    """Limiting distribution of a chain with a single reachable BSCC.

    The BSCC's balance equations are solved directly and the solution is
    then refined by power iteration until successive iterates differ by
    less than ``tol`` in L1 (or ``max_iter`` refinements ran).
    """
    _check_tol(tol)
    reach = reachable(chain, np.flatnonzero(initial > 0))
    comps = [c for c in bottom_components(chain) if reach[c[0]]]
    if len(comps) != 1:
        raise NotErgodic(f"{len(comps)} bottom components reachable from the initial distribution")
    comp = np.asarray(comps[0])
    period = chain_period(chain, comp)
    if require_aperiodic and period > 1:
        raise NotErgodic(f"the reachable bottom component is periodic (period {period})")
    sub = chain[comp][:, comp].tocsc()
    k = len(comp)
    a = (sub.T - sp.identity(k, format="csc")).tolil()
    a[k - 1, :] = np.ones(k)
    rhs = np.zeros(k)
    rhs[k - 1] = 1.0
    sol = np.atleast_1d(spsolve(a.tocsc(), rhs)) if k > 1 else np.ones(1)
    sol = np.clip(sol, 0.0, None)
    sol /= sol.sum()
    x = np.zeros(chain.shape[0])
    x[comp] = sol
    chain_t = chain.T.tocsr()
    for _ in range(max_iter if period == 1 else 0):
        nxt = chain_t @ x
        diff = float(np.abs(nxt - x).sum())
        x = nxt
        if diff < tol:
            break
    return x / x.sum()


def stationary_distribution(
    mdp: Mdp, policy: Policy, tol: float = 1e-12, require_aperiodic: bool = True
) -> np.ndarray:
    """Stationary distribution of ``mdp`` under ``policy`` (ergodic chains only)."""
    return stationary_of_chain(mdp.chain(policy), mdp.initial, tol, require_aperiodic)


@dataclass(frozen=True)
class EpisodicReport:
    ok: bool
    diagnostics: tuple[str, ...]

    def __bool__(self) -> bool:
        return self.ok


def check_episodic(mdp: Mdp, reset: int, probes: int = 100, seed: int = 0) -> EpisodicReport:
    """Check the episodic-process assumption with a seeded policy probe.

    Only the uniform policy and ``probes`` random deterministic policies are
    examined, so a pass is evidence rather than proof.
    """
    reset = _check_state(mdp, reset)
    diagnostics = []
    for a in mdp.actions_at(reset):
        if np.max(np.abs(mdp.row(reset, a) - mdp.initial)) > ROW_TOL:
            diagnostics.append(f"reset row mismatch (action {int(a)})")
            break
    rng = np.random.default_rng(seed)
    policies = [("uniform", Policy.uniform(mdp))]
    for i in range(probes):
        choice = np.empty(mdp.n_states, dtype=np.int64)
        for s in range(mdp.n_states):
            acts = mdp.actions_at(s)
            choice[s] = acts[rng.integers(len(acts))]
        policies.append((f"probe {i}", Policy.from_actions(choice, mdp.n_actions)))
    sources = set(np.flatnonzero(mdp.initial > 0).tolist()) | {reset}
    for name, pol in policies:
        chain = mdp.chain(pol)
        reach = reachable(chain, sources)
        comps = [c for c in bottom_components(chain) if reach[c[0]]]
        if len(comps) != 1 or reset not in comps[0]:
            diagnostics.append(f"reset unreachable under some policy ({name})")
            break
    diagnostics.append(f"probed uniform policy and {probes} random deterministic policies (not exhaustive)")
    return EpisodicReport(len(diagnostics) == 1, tuple(diagnostics))


# ---------------------------------------------------------------------------
# Simulation


class Sampler:
    """Fast repeated sampling from an MDP's rows with a seeded generator."""

    def __init__(self, mdp: Mdp, rng: np.random.Generator | int | None = None):
        self.mdp = mdp
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        cum = np.cumsum(mdp.prob)
        base = np.concatenate([[0.0], cum])[mdp.indptr[:-1]]
        self._cum = cum - np.repeat(base, np.diff(mdp.indptr))
        self._pair_id = mdp.pair_id
        self._buf = np.empty(0)
        self._pos = 0

    def uniform(self) -> float:
        if self._pos >= len(self._buf):
            self._buf = self.rng.random(4096)
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return float(u)

    def next_state(self, s: int, a: int) -> int:
        k = self._pair_id[s, a]
        lo, hi = self.mdp.indptr[k], self.mdp.indptr[k + 1]
        u = self.uniform()
        idx = lo + int(np.searchsorted(self._cum[lo:hi], u, side="right"))
        return int(self.mdp.dest[min(idx, hi - 1)])

    def initial_state(self) -> int:
        return _draw(self.mdp.initial, self.uniform())

    def action(self, policy_row: np.ndarray) -> int:
        return _draw(policy_row, self.uniform())


def _draw(dist: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(np.cumsum(dist), u * dist.sum(), side="right"))
    idx = min(idx, len(dist) - 1)
    while dist[idx] <= 0 and idx > 0:
        idx -= 1
    return idx


def simulate(
    mdp: Mdp,
    policy: Policy,
    seed: int | np.random.Generator | None,
    steps: int | None = None,
    until: Callable[[int], bool] | None = None,
    start: int | None = None,
    max_steps: int = 10_000_000,
) -> list[tuple[int, int, int]]:
    """Sample a path of (state, action, next state) triples.

    Stops after ``steps`` transitions, or once ``until(next_state)`` holds.
    """
    if steps is None and until is None:
        raise ValueError("give a step count or a stopping predicate")
    policy.check(mdp)
    sampler = Sampler(mdp, seed)
    s = sampler.initial_state() if start is None else _check_state(mdp, start)
    limit = steps if steps is not None else max_steps
    path = []
    for _ in range(limit):
        a = sampler.action(policy.probs[s])
        nxt = sampler.next_state(s, a)
        path.append((s, a, nxt))
        s = nxt
        if until is not None and until(s):
            break
    return path


def load_mdp(path: str) -> Mdp:
    with open(path) as fh:
        return Mdp.from_json(json.load(fh))


def save_mdp(mdp: Mdp, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(mdp.to_json(), fh)
