"""Latent abstractions: embeddings, latent MDPs, transition losses and PAC certificates."""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass
from typing import NamedTuple, Protocol

import numpy as np
import scipy.sparse as sp

from .errors import (
    CapExceeded,
    DegenerateReset,
    DomainMismatch,
    EmptySample,
    LabelMismatch,
    MissingEstimates,
    ModelError,
    UnseenPairWithoutSmoothing,
)
from .mdp import Mdp, Policy, Sampler, _check_state

REPORT_SCHEMA = "1.0"


@dataclass(frozen=True, eq=False)
class Embedding:
    """Total map from ground states to latent states."""

    classes: np.ndarray
    n_latent: int

    def __post_init__(self):
        classes = np.asarray(self.classes, dtype=np.int64)
        object.__setattr__(self, "classes", classes)
        if classes.ndim != 1:
            raise DomainMismatch("embedding must be a flat array of latent indices")
        if len(classes) and (classes.min() < 0 or classes.max() >= self.n_latent):
            raise DomainMismatch("embedding maps outside the latent state range")

    @classmethod
    def identity(cls, n: int) -> "Embedding":
        return cls(np.arange(n), n)

    @property
    def n_ground(self) -> int:
        return len(self.classes)

    def __call__(self, s):
        return self.classes[s]

    @property
    def matrix(self) -> sp.csr_matrix:
        """(ground x latent) 0/1 matrix; right-multiplying pushes rows forward."""
        n = self.n_ground
        return sp.csr_matrix((np.ones(n), (np.arange(n), self.classes)), shape=(n, self.n_latent))

    def push(self, dist: np.ndarray) -> np.ndarray:
        return np.bincount(self.classes, weights=np.asarray(dist, dtype=np.float64), minlength=self.n_latent)

    def check_labels(
        self,
        target: Iterable[int],
        bad: Iterable[int],
        latent_target: Iterable[int],
        latent_bad: Iterable[int],
    ) -> None:
        """Raise LabelMismatch unless target and bad membership is preserved."""
        for name, ground, latent in (("target", target, latent_target), ("bad", bad, latent_bad)):
            g = np.zeros(self.n_ground, dtype=bool)
            g[list(ground)] = True
            lat = np.zeros(self.n_latent, dtype=bool)
            lat[list(latent)] = True
            wrong = np.flatnonzero(g != lat[self.classes])
            if len(wrong):
                s = int(wrong[0])
                raise LabelMismatch(
                    f"{name} label not preserved at ground state {s} (latent {int(self.classes[s])})"
                )

    def to_json(self) -> dict:
        return {"n_latent": int(self.n_latent), "classes": self.classes.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "Embedding":
        return cls(np.asarray(data["classes"], dtype=np.int64), int(data["n_latent"]))


@dataclass(frozen=True, eq=False)
class LatentMdp:
    mdp: Mdp
    reset: int
    target: frozenset[int]
    bad: frozenset[int]

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    def to_json(self) -> dict:
        return {
            "mdp": self.mdp.to_json(),
            "reset": int(self.reset),
            "target": sorted(int(s) for s in self.target),
            "bad": sorted(int(s) for s in self.bad),
        }

    @classmethod
    def from_json(cls, data: dict) -> "LatentMdp":
        return cls(
            Mdp.from_json(data["mdp"]),
            int(data["reset"]),
            frozenset(int(s) for s in data["target"]),
            frozenset(int(s) for s in data["bad"]),
        )


def lift_policy(phi: Embedding, latent_policy: Policy) -> Policy:
    """Ground policy acting as ``latent_policy`` on the embedded state."""
    if latent_policy.probs.shape[0] != phi.n_latent:
        raise DomainMismatch(
            f"latent policy covers {latent_policy.probs.shape[0]} states, embedding has {phi.n_latent}"
        )
    return Policy(latent_policy.probs[phi.classes], latent_policy.deterministic)


def _latent_rows(latent: LatentMdp, phi: Embedding, ground: Mdp) -> np.ndarray:
    """Pair ids into the latent MDP for every ground pair."""
    if latent.mdp.n_actions < ground.n_actions:
        raise DomainMismatch("latent MDP has fewer actions than the ground MDP")
    if phi.n_ground != ground.n_states or phi.n_latent != latent.n_states:
        raise DomainMismatch("embedding does not match the ground and latent state spaces")
    ids = latent.mdp.pair_id[phi.classes[ground.pair_state], ground.pair_action]
    return ids


def _pair_weights(ground: Mdp, phi: Embedding, latent_policy: Policy, xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (ground.n_states,) or np.any(xi < 0) or abs(xi.sum() - 1.0) > 1e-9:
        raise ModelError("xi must be a distribution over ground states")
    probs = latent_policy.probs
    if probs.shape[0] != phi.n_latent:
        raise DomainMismatch("latent policy does not match the embedding")
    return xi[ground.pair_state] * probs[phi.classes[ground.pair_state], ground.pair_action]


def transition_loss_exact(
    ground: Mdp, latent: LatentMdp, phi: Embedding, latent_policy: Policy, xi: np.ndarray
) -> float:
    """Expected total variation between pushed-forward ground rows and latent rows."""
    w = _pair_weights(ground, phi, latent_policy, xi)
    ids = _latent_rows(latent, phi, ground)
    live = w > 0
    if np.any(ids[live] < 0):
        raise DomainMismatch("latent policy uses an action the latent MDP does not enable")
    pushed = (ground.matrix[live] @ phi.matrix).toarray()
    lat = latent.mdp.matrix[ids[live]].toarray()
    tv = 0.5 * np.abs(pushed - lat).sum(axis=1)
    return float(w[live] @ tv)


def transition_loss_upper(
    ground: Mdp, latent: LatentMdp, phi: Embedding, latent_policy: Policy, xi: np.ndarray
) -> float:
    """E[1 - P_latent(phi(s') | phi(s), a)]: the quantity the sampled estimator targets."""
    w = _pair_weights(ground, phi, latent_policy, xi)
    ids = _latent_rows(latent, phi, ground)
    live = np.flatnonzero(w > 0)
    if np.any(ids[live] < 0):
        raise DomainMismatch("latent policy uses an action the latent MDP does not enable")
    total = 0.0
    lat = latent.mdp.matrix
    for k in live:
        lo, hi = ground.indptr[k], ground.indptr[k + 1]
        hits = lat[ids[k]].toarray().ravel()[phi.classes[ground.dest[lo:hi]]]
        total += w[k] * float(ground.prob[lo:hi] @ (1.0 - hits))
    return total


def transition_loss_estimate(
    samples: Sequence[tuple[int, int, int]] | np.ndarray,
    latent: LatentMdp,
    phi: Embedding,
    reset: int,
) -> tuple[float, float]:
    """Sample means (1 - mean latent probability of the observed move, fraction of reset sources)."""
    arr = np.asarray(samples, dtype=np.int64).reshape(-1, 3)
    if len(arr) == 0:
        raise EmptySample("no transitions to estimate from")
    hits = _latent_hits(arr, latent, phi)
    return float(1.0 - hits.mean()), float(np.mean(arr[:, 0] == reset))


def _latent_hits(arr: np.ndarray, latent: LatentMdp, phi: Embedding) -> np.ndarray:
    ls, la, lt = phi.classes[arr[:, 0]], arr[:, 1], phi.classes[arr[:, 2]]
    ids = latent.mdp.pair_id[ls, la]
    hits = np.zeros(len(arr))
    ok = ids >= 0
    if np.any(ok):
        hits[ok] = np.asarray(latent.mdp.matrix[ids[ok], lt[ok]]).ravel()
    return hits


# ---------------------------------------------------------------------------
# Sample sizes and bounds


def pac_sample_size(
    mode: str,
    epsilon: float,
    delta: float,
    gamma: float | None = None,
    current: tuple[float, float] | None = None,
) -> int:
    """Number of stationary samples required by the Hoeffding-style certificates.

    ``raw``: ceil(-ln(delta) / (2 eps^2)).
    ``avg`` and ``init``: ceil(-g' ln(d') / (2 eps^2 (1-gamma)^2 z)), where
    ``avg`` uses d'=delta, g'=gamma^2, z=1 and ``init`` uses d'=delta/2,
    g'=(L + xi (1 + eps (1-gamma)))^2, z=xi^4 from ``current = (L, xi)``.
    """
    if not (0 < epsilon < 1) or not (0 < delta < 1):
        raise ModelError("epsilon and delta must lie in (0, 1)")
    if mode == "raw":
        return math.ceil(-math.log(delta) / (2 * epsilon**2))
    if gamma is None or not (0 < gamma < 1):
        raise ModelError("gamma must lie in (0, 1)")
    if mode == "avg":
        d, g, z = delta, gamma**2, 1.0
    elif mode == "init":
        if current is None:
            raise MissingEstimates("init mode needs the current (L_hat, xi_hat) estimates")
        loss, xi = current
        if xi <= 0:
            raise DegenerateReset("estimated reset mass is zero")
        d = delta / 2
        g = (loss + xi * (1 + epsilon * (1 - gamma))) ** 2
        z = xi**4
    else:
        raise ModelError(f"unknown sample-size mode {mode!r}")
    return math.ceil(-g * math.log(d) / (2 * epsilon**2 * (1 - gamma) ** 2 * z))


class GapBounds(NamedTuple):
    avg: float
    init: float

    @property
    def vacuous(self) -> bool:
        return self.avg > 1 or self.init > 1


def value_gap_bounds(loss: float, xi_reset: float, gamma: float) -> GapBounds:
    """(gamma L / (1-gamma), L / (xi_reset (1-gamma))), unclamped."""
    if xi_reset <= 0:
        raise DegenerateReset("reset mass must be positive")
    if not (0 < gamma < 1):
        raise ModelError("gamma must lie in (0, 1)")
    return GapBounds(gamma * loss / (1 - gamma), loss / (xi_reset * (1 - gamma)))


@dataclass
class PacReport:
    mode: str
    epsilon: float
    delta: float
    gamma: float
    samples: int
    L_hat: float
    xi_hat: float
    avg_bound: float
    init_bound: float
    required: int
    terminated_by: str
    zeta: float = 1.0
    schema: str = REPORT_SCHEMA

    @property
    def vacuous(self) -> bool:
        return self.avg_bound > 1 or self.init_bound > 1

    @property
    def certified(self) -> bool:
        return self.terminated_by == "criterion"

    def to_json(self) -> dict:
        out = asdict(self)
        out["vacuous"] = self.vacuous
        return out

    @classmethod
    def from_json(cls, data: dict) -> "PacReport":
        major = str(data.get("schema", REPORT_SCHEMA)).split(".")[0]
        if major != REPORT_SCHEMA.split(".")[0]:
            raise ModelError(f"unsupported report schema {data.get('schema')}")
        fields = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**fields)


def certified_bounds(loss: float, xi: float, epsilon: float, gamma: float) -> tuple[float, float]:
    """Bounds holding with the PAC confidence: estimate-based closed forms plus epsilon."""
    avg = gamma * loss / (1 - gamma) + epsilon
    init = loss / (xi * (1 - gamma)) + epsilon if xi > 0 else math.inf
    return avg, init


# ---------------------------------------------------------------------------
# Stationary sampling


class TransitionSource(Protocol):
    reset: int

    def draw(self, k: int) -> np.ndarray: ...


def mixing_proxy(chain: sp.csr_matrix, initial: np.ndarray, tol: float = 1e-3, cap: int = 10_000) -> int:
    """Steps until successive state distributions from ``initial`` differ by < ``tol`` in L1."""
    x = np.asarray(initial, dtype=np.float64)
    ct = chain.T.tocsr()
    for t in range(1, cap + 1):
        nxt = ct @ x
        if np.abs(nxt - x).sum() < tol:
            return t
        x = nxt
    return cap


class TrajectorySource:
    """Single long trajectory of the ground MDP under a fixed policy, after a burn-in."""

    def __init__(
        self,
        mdp: Mdp,
        policy: Policy,
        reset: int,
        seed: int | np.random.Generator | None = 0,
        burn_in: int | None = None,
    ):
        policy.check(mdp)
        self.mdp = mdp
        self.reset = _check_state(mdp, reset)
        self.sampler = Sampler(mdp, seed)
        self._cum = np.cumsum(policy.probs, axis=1)
        self._det = policy.actions if policy.deterministic else None
        if burn_in is None:
            burn_in = 10 * mixing_proxy(mdp.chain(policy), mdp.initial)
        self.burn_in = burn_in
        self.state = self.sampler.initial_state()
        self.draw(burn_in)

    def _action(self, s: int) -> int:
        if self._det is not None:
            return int(self._det[s])
        row = self._cum[s]
        return min(int(np.searchsorted(row, self.sampler.uniform() * row[-1], side="right")), len(row) - 1)

    def draw(self, k: int) -> np.ndarray:
        out = np.empty((k, 3), dtype=np.int64)
        s = self.state
        nxt_fn = self.sampler.next_state
        for i in range(k):
            a = self._action(s)
            t = nxt_fn(s, a)
            out[i] = (s, a, t)
            s = t
        self.state = s
        return out


def certify_fixed(
    source: TransitionSource,
    latent: LatentMdp,
    phi: Embedding,
    epsilon: float,
    delta: float,
    gamma: float,
    mode: str = "avg",
) -> PacReport:
    """Certificate from the fixed sample size of ``mode`` (``raw`` or ``avg``)."""
    required = pac_sample_size(mode, epsilon, delta, gamma)
    loss, xi = transition_loss_estimate(source.draw(required), latent, phi, source.reset)
    avg, init = certified_bounds(loss, xi, epsilon, gamma)
    return PacReport(mode, epsilon, delta, gamma, required, loss, xi, avg, init, required, "criterion")


def certify_online(
    source: TransitionSource,
    latent: LatentMdp,
    phi: Embedding,
    epsilon: float,
    delta: float,
    gamma: float,
    cap: int = 10_000_000,
    batch: int | None = None,
    raise_on_cap: bool = True,
) -> PacReport:
    """Sample until the init-mode requirement computed from the running estimates is met.

    Each round draws enough samples to reach the latest requirement (at
    least ``batch``), then recomputes it.  When ``cap`` is hit first the
    report is marked ``terminated_by="cap"``; it is raised inside
    CapExceeded unless ``raise_on_cap`` is false.
    """
    if batch is None:
        batch = pac_sample_size("raw", epsilon, delta / 2)
    n = 0
    hit_sum = 0.0
    reset_sum = 0
    required = batch
    terminated = "cap"
    while n < cap:
        k = min(max(batch, required - n), cap - n)
        arr = source.draw(k)
        hit_sum += float(_latent_hits(arr, latent, phi).sum())
        reset_sum += int(np.sum(arr[:, 0] == source.reset))
        n += k
        loss, xi = 1.0 - hit_sum / n, reset_sum / n
        if xi > 0:
            required = pac_sample_size("init", epsilon, delta, gamma, (loss, xi))
            if n >= required:
                terminated = "criterion"
                break
        else:
            required = n + batch
    loss, xi = 1.0 - hit_sum / n, reset_sum / n
    avg, init = certified_bounds(loss, xi, epsilon, gamma)
    zeta = xi**4 if xi > 0 else 0.0
    report = PacReport("online", epsilon, delta, gamma, n, loss, xi, avg, init, int(required), terminated, zeta)
    if terminated == "cap" and raise_on_cap:
        raise CapExceeded(f"sample cap {cap} reached before the requirement {required}", report)
    return report


# ---------------------------------------------------------------------------
# Count-based latent model


def empirical_latent_mdp(
    samples: Sequence[tuple[int, int, int]] | np.ndarray,
    phi: Embedding,
    n_actions: int,
    smoothing: float = 0.0,
    reset: int | None = None,
    target: Iterable[int] = (),
    bad: Iterable[int] = (),
    unseen: str = "error",
) -> LatentMdp:
    """Maximum-likelihood (optionally smoothed) latent MDP from ground transitions.

    ``reset`` is a ground state; its latent image gets one row pooled over
    all actions.  ``unseen="self"`` fills never-observed pairs with a
    self-loop instead of raising, which keeps smoothing off for the
    observed pairs.
    """
    k = phi.n_latent
    arr = np.asarray(samples, dtype=np.int64).reshape(-1, 3)
    ls, la, lt = phi.classes[arr[:, 0]], arr[:, 1], phi.classes[arr[:, 2]]
    latent_reset = int(phi.classes[reset]) if reset is not None else -1
    pair = ls * n_actions + la
    if latent_reset >= 0:
        # one pooled row for every action at the latent reset
        at_reset = ls == latent_reset
        pair = np.where(at_reset, latent_reset * n_actions, pair)
    keys, counts = np.unique(pair * k + lt, return_counts=True)
    kp, kt = keys // k, keys % k
    totals = np.bincount(kp, weights=counts, minlength=k * n_actions)
    if latent_reset >= 0:
        base = latent_reset * n_actions
        sel = kp == base
        extra_p = np.concatenate([np.full(sel.sum(), base + a) for a in range(1, n_actions)]) if n_actions > 1 else np.empty(0, dtype=np.int64)
        kp = np.concatenate([kp, extra_p]).astype(np.int64)
        kt = np.concatenate([kt, np.tile(kt[sel], n_actions - 1)])
        counts = np.concatenate([counts, np.tile(counts[sel], n_actions - 1)])
        totals[base: base + n_actions] = totals[base]
    if smoothing > 0:
        dense_counts = np.zeros((k * n_actions, k))
        dense_counts[kp, kt] = counts
        probs = (dense_counts + smoothing) / (totals + smoothing * k)[:, None]
        pair_ids = np.repeat(np.arange(k * n_actions), k)
        dest = np.tile(np.arange(k), k * n_actions)
        prob = probs.ravel()
    else:
        missing = np.flatnonzero(totals == 0)
        if len(missing):
            if unseen != "self":
                raise UnseenPairWithoutSmoothing(
                    f"latent pair (state {missing[0] // n_actions}, action {missing[0] % n_actions}) was never observed"
                )
            kp = np.concatenate([kp, missing])
            kt = np.concatenate([kt, missing // n_actions])
            counts = np.concatenate([counts, np.ones(len(missing))])
            totals[missing] = 1.0
        order = np.lexsort((kt, kp))
        pair_ids, dest = kp[order], kt[order]
        prob = counts[order] / totals[pair_ids]
    indptr = np.concatenate([[0], np.cumsum(np.bincount(pair_ids, minlength=k * n_actions))])
    all_pairs = np.arange(k * n_actions)
    if latent_reset >= 0:
        lo, hi = indptr[latent_reset * n_actions], indptr[latent_reset * n_actions + 1]
        initial = np.zeros(k)
        initial[dest[lo:hi]] = prob[lo:hi]
    else:
        initial = np.full(k, 1.0 / k)
    mdp = Mdp.from_arrays(
        k, n_actions, all_pairs // n_actions, all_pairs % n_actions, indptr, dest, prob, initial
    )
    return LatentMdp(
        mdp,
        max(latent_reset, 0),
        frozenset(int(phi.classes[s]) for s in target),
        frozenset(int(phi.classes[s]) for s in bad),
    )
