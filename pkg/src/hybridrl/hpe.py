"""Hybrid fitted policy evaluation (discounted and finite-horizon)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SampleBudgetExceeded
from .funcapprox import HybridBatch, ZeroFn, expected_value, solve_hybrid_regression
from .mdp import (
    RolloutStats,
    TabularMdp,
    Trajectories,
    bellman_backup,
    estimate_q_discounted,
    estimate_q_rollout,
    function_table,
    sample_occupancy,
)


@dataclass
class HpeConfig:
    k1: int = 8
    k2: int = 28
    m_on: int = 2000
    m_off: int = 2000
    lam: float = 1.0
    average_iterates: bool = True
    max_env_samples: int | None = None
    q_estimator: str = "discounted"  # or "geometric"

    def __post_init__(self):
        if not (self.k2 > self.k1 >= 0):
            raise ValueError("need k2 > k1 >= 0")
        if self.m_on < 0 or self.m_off < 0 or self.m_on + self.m_off == 0:
            raise ValueError("need m_on + m_off > 0")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.q_estimator not in ("discounted", "geometric"):
            raise ValueError(f"unknown q_estimator {self.q_estimator!r}")

    @classmethod
    def theory_defaults(cls, gamma: float, T: int, **kw) -> "HpeConfig":
        """Burn-in ``4 ceil(log(1/gamma))`` followed by ``T`` averaged iterates."""
        k1 = 4 * math.ceil(math.log(1.0 / gamma))
        return cls(k1=k1, k2=k1 + T, **kw)


class AveragedFn:
    """Pointwise mean of several fitted functions."""

    def __init__(self, fns):
        if not fns:
            raise ValueError("need at least one function")
        self.fns = list(fns)

    def __call__(self, states, actions) -> np.ndarray:
        return np.mean([f(states, actions) for f in self.fns], axis=0)

    predict = __call__


@dataclass
class PolicyEvalResult:
    f: object
    iterates: list
    d_off: tuple | None
    d_on: tuple | None
    losses: list = field(default_factory=list)
    rollout_stats: RolloutStats = field(default_factory=RolloutStats)


def _check_budget(env, cfg: HpeConfig) -> None:
    if cfg.max_env_samples is not None and env.n_samples > cfg.max_env_samples:
        raise SampleBudgetExceeded(f"{env.n_samples} environment samples > {cfg.max_env_samples}")


def hpe(policy, fclass, offline_source, env, cfg: HpeConfig, rng: np.random.Generator,
        gamma: float | None = None) -> PolicyEvalResult:
    """Evaluate ``policy`` by alternating offline TD and online Monte-Carlo regression.

    Every iteration draws fresh online pairs from the discounted occupancy
    (with rollout return targets) and fresh offline tuples, then regresses
    with the previous iterate frozen as the bootstrap target.  Returns the
    average of iterates ``k1+1..k2`` or the last iterate.
    """
    gamma = env.discount if gamma is None else gamma
    stats = RolloutStats()
    f_prev = ZeroFn()
    iterates, losses = [], []
    d_on = d_off = None
    for k in range(1, cfg.k2 + 1):
        d_on = d_off = None
        if cfg.m_on:
            s_on, a_on = sample_occupancy(env, policy, gamma, rng, cfg.m_on, stats)
            estimate = estimate_q_rollout if cfg.q_estimator == "geometric" else estimate_q_discounted
            y = estimate(env, policy, gamma, s_on, a_on, rng, stats)
            d_on = (s_on, a_on, y)
            _check_budget(env, cfg)
        if cfg.m_off and offline_source is not None:
            s, a, r, s_next = offline_source.sample(cfg.m_off, rng)
            d_off = (s, a, r, s_next)
        batch = _discounted_batch(d_off, d_on, f_prev, policy, cfg.lam, rng)
        f_k = solve_hybrid_regression(batch, fclass, gamma,
                                      init=None if isinstance(f_prev, ZeroFn) else f_prev, rng=rng)
        losses.append({"iter": k, **batch.losses(f_k, gamma)})
        if k > cfg.k1:
            iterates.append(f_k)
        f_prev = f_k
    f_bar = AveragedFn(iterates) if cfg.average_iterates else iterates[-1]
    return PolicyEvalResult(f_bar, iterates, d_off, d_on, losses, stats)


def _discounted_batch(d_off, d_on, f_prev, policy, lam, rng) -> HybridBatch:
    kw = {"lam": lam}
    if d_off is not None:
        s, a, r, s_next = d_off
        kw.update(off_states=s, off_actions=a, off_rewards=r,
                  off_next_values=expected_value(f_prev, policy, s_next, rng))
    if d_on is not None:
        kw.update(on_states=d_on[0], on_actions=d_on[1], on_targets=d_on[2])
    return HybridBatch(**kw)


def offline_bellman_residual(f, policy, mdp: TabularMdp, nu) -> float:
    """Exact ``E_nu (f - T^pi f)^2`` on a tabular MDP."""
    table = f if isinstance(f, np.ndarray) else function_table(f, mdp.n_states, mdp.n_actions)
    resid = table - bellman_backup(mdp, policy, table)
    return float(np.sum(np.asarray(nu) * resid ** 2))


# ---------------------------------------------------------------------------
# finite horizon


class StepDataset:
    """Transitions grouped by timestep: ``rows[h] = (obs, actions, rewards, next_obs)``."""

    def __init__(self, rows):
        self.rows = [tuple(np.asarray(x) for x in r) for r in rows]

    @classmethod
    def from_trajectories(cls, traj: Trajectories) -> "StepDataset":
        return cls([(traj.obs[:, h], traj.actions[:, h], traj.rewards[:, h], traj.next_obs[:, h])
                    for h in range(traj.horizon)])

    @property
    def horizon(self) -> int:
        return len(self.rows)

    def size(self, h: int) -> int:
        return len(self.rows[h][2])

    def sample(self, h: int, m: int | None, rng: np.random.Generator):
        """``m`` rows of step ``h`` drawn with replacement (all rows when ``m`` is None)."""
        if m is None or m >= self.size(h):
            return self.rows[h]
        idx = rng.integers(0, self.size(h), size=m)
        return tuple(x[idx] for x in self.rows[h])


@dataclass
class FhpeResult:
    fns: list
    d_off: list
    d_on: list
    losses: list
    online: Trajectories | None = None


def fhpe(policies, classes, offline: StepDataset | None, env, lam: float, m_on: int,
         m_off: int | None, rng: np.random.Generator, init=None,
         online: Trajectories | None = None) -> FhpeResult:
    """Backward-in-time hybrid regression for per-step critics ``f_0..f_{H-1}``.

    Step ``h`` regresses offline rows onto ``r + E f_{h+1}(s', pi_{h+1}(s'))``
    and, weighted by ``lam``, online rows onto their Monte-Carlo return to go.
    ``online`` may carry already collected trajectories (``m_on`` is then
    ignored).  ``init[h]`` warm-starts iterative function classes.
    """
    H = env.horizon if online is None else online.horizon
    if online is None and m_on:
        online = env.rollout(policies, m_on, rng)
    rtg = online.returns_to_go() if online is not None else None
    fns = [None] * H
    d_off, d_on, losses = [None] * H, [None] * H, [None] * H
    f_next = ZeroFn()
    for h in range(H - 1, -1, -1):
        kw = {"lam": lam}
        if offline is not None and (m_off is None or m_off > 0):
            s, a, r, s_next = offline.sample(h, m_off, rng)
            nv = np.zeros(len(r)) if h == H - 1 else expected_value(f_next, policies[h + 1], s_next, rng)
            kw.update(off_states=s, off_actions=a, off_rewards=r, off_next_values=nv)
            d_off[h] = (s, a, r, s_next)
        if online is not None:
            kw.update(on_states=online.obs[:, h], on_actions=online.actions[:, h], on_targets=rtg[:, h])
            d_on[h] = (online.obs[:, h], online.actions[:, h], rtg[:, h])
        batch = HybridBatch(**kw)
        warm = None if init is None else init[h]
        fns[h] = solve_hybrid_regression(batch, classes[h], 1.0, init=warm, rng=rng)
        losses[h] = {"h": h, **batch.losses(fns[h], 1.0)}
        f_next = fns[h]
    return FhpeResult(fns, d_off, d_on, losses, online)
