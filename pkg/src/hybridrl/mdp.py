"""Tabular MDPs, batched environments, occupancy sampling and exact oracles.

All environments in this package are *batched* and stateless: ``reset`` and
``step`` take arrays of states/actions plus an explicit ``numpy`` generator,
so replaying a seed replays every trajectory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Protocol

import numpy as np

__all__ = [
    "TabularMdp",
    "TabularPolicy",
    "TabularEnv",
    "TabularOfflineSource",
    "function_table",
    "FiniteHorizonAdapter",
    "Trajectories",
    "RolloutStats",
    "Environment",
    "policy_table",
    "rollout_cap",
    "sample_occupancy",
    "estimate_q_rollout",
    "estimate_q_discounted",
    "value_iteration",
    "tabular_q_exact",
    "tabular_v_exact",
    "tabular_occupancy_exact",
    "bellman_backup",
    "concentrability",
    "npg_coverage_estimate",
    "finite_horizon_q",
    "random_mdp",
]


@dataclass(frozen=True)
class TabularMdp:
    """Discounted MDP with a reset distribution over state-action pairs."""

    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    init_dist: np.ndarray  # (S, A), joint over pairs
    discount: float

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        mu0 = np.asarray(self.init_dist, dtype=float)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "init_dist", mu0)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A = P.shape[:2]
        if r.shape != (S, A) or mu0.shape != (S, A):
            raise ValueError("reward and init_dist must have shape (S, A)")
        if np.any(P < 0) or np.max(np.abs(P.sum(-1) - 1.0)) > 1e-12:
            raise ValueError("each transition row must be a probability vector")
        if np.any(mu0 < 0) or abs(mu0.sum() - 1.0) > 1e-12:
            raise ValueError("init_dist must sum to one")
        if np.any(r < 0) or np.any(r > 1):
            raise ValueError("rewards must lie in [0, 1]")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def to_json(self) -> str:
        doc = {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "P": self.transition.tolist(),
            "r": self.reward.tolist(),
            "mu0": self.init_dist.tolist(),
            "gamma": self.discount,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        doc = json.loads(text)
        mdp = cls(np.array(doc["P"]), np.array(doc["r"]), np.array(doc["mu0"]), float(doc["gamma"]))
        if (mdp.n_states, mdp.n_actions) != (doc["n_states"], doc["n_actions"]):
            raise ValueError("declared sizes do not match the arrays")
        return mdp

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "TabularMdp":
        return cls.from_json(Path(path).read_text())


def random_mdp(n_states: int, n_actions: int, gamma: float, rng: np.random.Generator,
               init: str = "uniform") -> TabularMdp:
    """Random MDP: Dirichlet(1) transitions, uniform rewards in [0, 1]."""
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(size=(n_states, n_actions))
    if init == "uniform":
        mu0 = np.full((n_states, n_actions), 1.0 / (n_states * n_actions))
    else:
        mu0 = rng.dirichlet(np.ones(n_states * n_actions)).reshape(n_states, n_actions)
    # renormalise so the row-sum invariant holds to machine precision
    P = P / P.sum(-1, keepdims=True)
    mu0 = mu0 / mu0.sum()
    return TabularMdp(P, r, mu0, gamma)


class TabularPolicy:
    """Stochastic policy given by an (S, A) probability table."""

    def __init__(self, table):
        table = np.asarray(table, dtype=float)
        if table.ndim != 2 or np.any(table < 0) or np.max(np.abs(table.sum(1) - 1)) > 1e-9:
            raise ValueError("policy table must be (S, A) with rows summing to one")
        self.table = table

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions)
        table = np.zeros((len(actions), n_actions))
        table[np.arange(len(actions)), actions] = 1.0
        return cls(table)

    @property
    def n_actions(self) -> int:
        return self.table.shape[1]

    def probs(self, states) -> np.ndarray:
        return self.table[np.asarray(states)]

    def sample(self, states, rng: np.random.Generator) -> np.ndarray:
        return _sample_rows(self.probs(states), rng)


def policy_table(policy) -> np.ndarray:
    """Return the (S, A) table of a tabular policy or a raw array."""
    if isinstance(policy, np.ndarray):
        return policy
    return np.asarray(policy.table)


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling of one index per row of a probability matrix."""
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs)) * cdf[:, -1]
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


class Environment(Protocol):
    """Batched, stateless environment interface."""

    def reset(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]: ...

    def step(self, states, actions, rng: np.random.Generator, h: int = 0) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class RolloutStats:
    """Counters shared by the samplers (truncated geometric rollouts)."""

    rollouts: int = 0
    truncated: int = 0


class TabularEnv:
    """Sampling interface over a :class:`TabularMdp`.

    ``n_samples`` counts every transition drawn through :meth:`step`.
    """

    def __init__(self, mdp: TabularMdp):
        self.mdp = mdp
        self._cdf = np.cumsum(mdp.transition, axis=-1)
        self._mu0 = mdp.init_dist.ravel()
        self.n_samples = 0

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    @property
    def discount(self) -> float:
        return self.mdp.discount

    def reset(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        flat = _sample_rows(np.broadcast_to(self._mu0, (n, self._mu0.size)), rng)
        return flat // self.mdp.n_actions, flat % self.mdp.n_actions

    def reset_states(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.reset(n, rng)[0]

    def observe(self, states, h: int, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(states)

    def step(self, states, actions, rng: np.random.Generator, h: int = 0):
        states = np.asarray(states)
        actions = np.asarray(actions)
        self.n_samples += states.size
        rewards = self.mdp.reward[states, actions]
        cdf = self._cdf[states, actions]
        u = rng.random(states.shape) * cdf[..., -1]
        nxt = np.minimum((u[..., None] >= cdf).sum(-1), self.mdp.n_states - 1)
        return rewards, nxt


class TabularOfflineSource:
    """I.i.d. ``(s, a, r, s')`` draws with ``(s, a) ~ nu``; not counted as online samples."""

    def __init__(self, mdp: TabularMdp, nu=None):
        self.mdp = mdp
        S, A = mdp.n_states, mdp.n_actions
        nu = np.full((S, A), 1.0 / (S * A)) if nu is None else np.asarray(nu, dtype=float)
        if nu.shape != (S, A) or abs(nu.sum() - 1) > 1e-9 or np.any(nu < 0):
            raise ValueError("nu must be an (S, A) probability table")
        self.nu = nu
        self._env = TabularEnv(mdp)

    def sample(self, m: int, rng: np.random.Generator):
        flat = _sample_rows(np.broadcast_to(self.nu.ravel(), (m, self.nu.size)), rng)
        s, a = flat // self.mdp.n_actions, flat % self.mdp.n_actions
        r, s_next = self._env.step(s, a, rng)
        return s, a, r, s_next


def function_table(f, n_states: int, n_actions: int) -> np.ndarray:
    """Evaluate ``f(s, a)`` on the full grid; returns (S, A)."""
    s = np.repeat(np.arange(n_states), n_actions)
    a = np.tile(np.arange(n_actions), n_states)
    return np.asarray(f(s, a), dtype=float).reshape(n_states, n_actions)


def rollout_cap(gamma: float, tol: float = 1e-6) -> int:
    """Length at which geometric rollouts are truncated (continuation mass <= tol)."""
    if gamma <= 0.0:
        return 0
    return int(math.ceil(math.log(tol) / math.log(gamma)))


def sample_occupancy(env, policy, gamma: float, rng: np.random.Generator, n: int = 1,
                     stats: RolloutStats | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` state-action pairs from the discounted occupancy of ``policy``.

    A horizon ``h`` is drawn with probability ``(1 - gamma) gamma**h`` (capped
    at :func:`rollout_cap`), the episode is reset from the pair distribution
    and ``policy`` is executed for ``h`` steps.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    cap = rollout_cap(gamma)
    if gamma == 0.0:
        horizons = np.zeros(n, dtype=int)
    else:
        horizons = rng.geometric(1.0 - gamma, size=n) - 1
    over = horizons > cap
    if stats is not None:
        stats.rollouts += n
        stats.truncated += int(over.sum())
    horizons = np.minimum(horizons, cap)
    states, actions = env.reset(n, rng)
    for t in range(int(horizons.max(initial=0))):
        live = np.flatnonzero(horizons > t)
        _, nxt = env.step(states[live], actions[live], rng)
        states[live] = nxt
        actions[live] = policy.sample(nxt, rng)
    return states, actions


def estimate_q_rollout(env, policy, gamma: float, states, actions, rng: np.random.Generator,
                       stats: RolloutStats | None = None) -> np.ndarray:
    """Unbiased Monte-Carlo estimates of ``Q^pi(s, a)`` for each given pair.

    The rollout continues with probability ``gamma`` after every step and
    returns the *undiscounted* reward sum, so step ``t`` is reached with
    probability ``gamma**t``.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    s = np.array(states, copy=True)
    a = np.array(actions, copy=True)
    n = s.size
    y = np.zeros(n)
    live = np.arange(n)
    cap = rollout_cap(gamma)
    for t in range(cap + 1):
        r, nxt = env.step(s[live], a[live], rng)
        y[live] += r
        keep = rng.random(live.size) < gamma
        live, nxt = live[keep], nxt[keep]
        if live.size == 0:
            break
        s[live] = nxt
        a[live] = policy.sample(nxt, rng)
    if stats is not None:
        stats.rollouts += n
        stats.truncated += int(live.size)
    return y


def estimate_q_discounted(env, policy, gamma: float, states, actions, rng: np.random.Generator,
                          stats: RolloutStats | None = None) -> np.ndarray:
    """Monte-Carlo ``Q^pi(s, a)`` estimates from discounted reward sums.

    Same expectation as :func:`estimate_q_rollout` (up to the shared
    truncation at :func:`rollout_cap`) but without the variance of a random
    episode length.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    s = np.array(states, copy=True)
    a = np.array(actions, copy=True)
    y = np.zeros(s.size)
    weight = 1.0
    for _ in range(rollout_cap(gamma) + 1):
        r, s = env.step(s, a, rng)
        y += weight * r
        weight *= gamma
        a = policy.sample(s, rng)
    if stats is not None:
        stats.rollouts += s.size
    return y


def value_iteration(mdp: TabularMdp, tol: float = 1e-12, max_iters: int = 100_000):
    """Optimal Q table and a greedy deterministic policy."""
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iters):
        q_new = mdp.reward + mdp.discount * mdp.transition @ q.max(axis=1)
        if np.max(np.abs(q_new - q)) < tol:
            q = q_new
            break
        q = q_new
    return q, TabularPolicy.deterministic(q.argmax(axis=1), mdp.n_actions)


def _pair_transition(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    """(SA, SA) matrix M[(s,a),(s',a')] = P(s'|s,a) pi(a'|s')."""
    S, A = mdp.n_states, mdp.n_actions
    return (mdp.transition[:, :, :, None] * pi[None, None, :, :]).reshape(S * A, S * A)


def tabular_q_exact(mdp: TabularMdp, policy) -> np.ndarray:
    """Solve ``Q = r + gamma P^pi Q`` directly."""
    pi = policy_table(policy)
    S, A = mdp.n_states, mdp.n_actions
    if S * A > 5000:
        raise ValueError("dense oracle limited to |S||A| <= 5000")
    M = _pair_transition(mdp, pi)
    q = np.linalg.solve(np.eye(S * A) - mdp.discount * M, mdp.reward.ravel())
    return q.reshape(S, A)


def tabular_v_exact(mdp: TabularMdp, policy) -> float:
    """Expected discounted return from the pair reset distribution."""
    return float(np.sum(mdp.init_dist * tabular_q_exact(mdp, policy)))


def tabular_occupancy_exact(mdp: TabularMdp, policy) -> np.ndarray:
    """Normalised discounted state-action occupancy, shape (S, A)."""
    pi = policy_table(policy)
    S, A = mdp.n_states, mdp.n_actions
    M = _pair_transition(mdp, pi)
    g = mdp.discount
    d = (1.0 - g) * np.linalg.solve((np.eye(S * A) - g * M).T, mdp.init_dist.ravel())
    return d.reshape(S, A)


def bellman_backup(mdp: TabularMdp, policy, f) -> np.ndarray:
    """Apply the policy Bellman operator to a value table."""
    pi = policy_table(policy)
    f = np.asarray(f, dtype=float)
    v_next = np.sum(pi * f, axis=1)
    return mdp.reward + mdp.discount * mdp.transition @ v_next


def concentrability(mdp: TabularMdp, nu, pi_e) -> float:
    """``sup d^{pi_e}/nu``; ``inf`` if ``nu`` misses mass that ``d^{pi_e}`` has."""
    d = tabular_occupancy_exact(mdp, pi_e)
    return _max_ratio(d, np.asarray(nu, dtype=float).reshape(d.shape))


def _max_ratio(num: np.ndarray, den: np.ndarray, tol: float = 1e-14) -> float:
    support = num > tol
    if np.any(den[support] <= 0):
        return math.inf
    if not support.any():
        return 0.0
    return float(np.max(num[support] / den[support]))


def npg_coverage_estimate(mdp: TabularMdp, pi_e, n_probe_policies: int,
                          rng: np.random.Generator) -> float:
    """Lower bound on the NPG coverage constant of ``pi_e``.

    Probes every deterministic policy when there are at most
    ``n_probe_policies`` of them, otherwise ``n_probe_policies`` random
    stochastic policies (Dirichlet rows) plus ``pi_e`` itself.
    """
    S, A = mdp.n_states, mdp.n_actions
    d_e = tabular_occupancy_exact(mdp, pi_e)
    if A ** S <= n_probe_policies:
        probes = (TabularPolicy.deterministic(acts, A) for acts in product(range(A), repeat=S))
    else:
        probes = [TabularPolicy(rng.dirichlet(np.ones(A), size=S)) for _ in range(n_probe_policies)]
        probes.append(TabularPolicy(policy_table(pi_e)))
    best = 0.0
    for pi in probes:
        best = max(best, _max_ratio(d_e, tabular_occupancy_exact(mdp, pi)))
    return best


def finite_horizon_q(mdp: TabularMdp, policies, horizon: int) -> np.ndarray:
    """Undiscounted backward induction; returns Q of shape (H, S, A)."""
    S, A = mdp.n_states, mdp.n_actions
    q = np.zeros((horizon, S, A))
    v_next = np.zeros(S)
    for h in range(horizon - 1, -1, -1):
        q[h] = mdp.reward + mdp.transition @ v_next
        v_next = np.sum(policy_table(policies[h]) * q[h], axis=1)
    return q


@dataclass
class Trajectories:
    """Finite-horizon rollouts; every array is indexed ``[episode, h]``."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    latents: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.rewards.shape[0]

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    def returns_to_go(self) -> np.ndarray:
        return np.cumsum(self.rewards[:, ::-1], axis=1)[:, ::-1]


class FiniteHorizonAdapter:
    """Runs a batched base environment for exactly ``horizon`` steps per episode.

    The base environment must provide ``reset_states``, ``observe`` and
    ``step``; per-step policies map observations to actions.
    """

    def __init__(self, base, horizon: int):
        if horizon < 1:
            raise ValueError("horizon must be positive")
        self.base = base
        self.horizon = horizon
        self._states = None
        self.h = 0

    @property
    def n_samples(self) -> int:
        return self.base.n_samples

    def reset(self, n: int, rng: np.random.Generator) -> np.ndarray:
        self._states = self.base.reset_states(n, rng)
        self.h = 0
        return self.base.observe(self._states, 0, rng)

    def step(self, actions, rng: np.random.Generator):
        """Advance one step; returns ``(rewards, next_obs, done)``."""
        if self._states is None or self.h >= self.horizon:
            raise RuntimeError("episode finished; call reset first")
        rewards, self._states = self.base.step(self._states, actions, rng, self.h)
        self.h += 1
        done = self.h == self.horizon
        return rewards, self.base.observe(self._states, self.h, rng), done

    def rollout(self, policies, n: int, rng: np.random.Generator) -> Trajectories:
        """Collect ``n`` episodes with per-step policies ``policies[h]``."""
        obs = self.reset(n, rng)
        o_list, a_list, r_list, lat = [], [], [], []
        for h in range(self.horizon):
            lat.append(self._states)
            actions = policies[h].sample(obs, rng)
            rewards, nxt, _ = self.step(actions, rng)
            o_list.append(obs)
            a_list.append(actions)
            r_list.append(rewards)
            obs = nxt
        o_list.append(obs)
        obs_arr = np.stack(o_list, axis=1)
        return Trajectories(
            obs=obs_arr[:, :-1],
            actions=np.stack(a_list, axis=1),
            rewards=np.stack(r_list, axis=1).astype(float),
            next_obs=obs_arr[:, 1:],
            latents=np.stack(lat, axis=1),
        )
