"""Rich-observation combination lock with continuous actions, plus offline data tools.

Latent layout per step: two good states (0, 1) and an absorbing dead state
(2).  From a good state exactly one of the ten latent actions keeps the
agent on the good chain; everything else falls into the dead state and pays
a small decoy reward half of the time.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import hadamard

from .funcapprox import softmax
from .hpe import StepDataset
from .mdp import FiniteHorizonAdapter, Trajectories, _sample_rows

GOOD_A, GOOD_B, DEAD = 0, 1, 2
N_LATENT = 3


def observation_dim(horizon: int) -> int:
    return 1 << math.ceil(math.log2(horizon + N_LATENT))


@dataclass
class ComblockConfig:
    horizon: int = 5
    n_latent_actions: int = 10
    noise_std: float = 0.1
    anti_reward: float = 0.1
    anti_reward_prob: float = 0.5
    optimal_reward: float = 1.0
    continuous_actions: bool = True
    seed: int = 0
    good_actions: list | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if self.n_latent_actions < 2:
            raise ValueError("need at least two latent actions")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.good_actions is None:
            rng = np.random.default_rng(self.seed)
            self.good_actions = rng.integers(0, self.n_latent_actions, size=(self.horizon, 2)).tolist()
        table = np.asarray(self.good_actions)
        if table.shape != (self.horizon, 2) or table.min() < 0 or table.max() >= self.n_latent_actions:
            raise ValueError("good_actions must be an (H, 2) table of valid action indices")
        self.good_actions = table.tolist()

    @property
    def obs_dim(self) -> int:
        return observation_dim(self.horizon)

    @property
    def good_table(self) -> np.ndarray:
        return np.asarray(self.good_actions, dtype=int)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ComblockConfig":
        return cls(**d)


@dataclass(frozen=True)
class LatentState:
    h: int
    index: int

    def __post_init__(self):
        if self.index not in (GOOD_A, GOOD_B, DEAD):
            raise ValueError(f"bad latent index {self.index}")


def _latent_step_batch(cfg: ComblockConfig, h: int, states, actions, rng: np.random.Generator):
    states = np.asarray(states, dtype=int)
    actions = np.asarray(actions, dtype=int)
    n = states.shape[0]
    good = states != DEAD
    good_action = np.zeros(n, dtype=bool)
    good_action[good] = actions[good] == cfg.good_table[h][states[good]]
    stays_good = good & good_action
    fell = good & ~good_action
    nxt = np.full(n, DEAD)
    nxt[stays_good] = rng.integers(0, 2, size=int(stays_good.sum()))
    rewards = np.zeros(n)
    rewards[fell] = np.where(rng.random(int(fell.sum())) < cfg.anti_reward_prob, cfg.anti_reward, 0.0)
    if h == cfg.horizon - 1:
        rewards[stays_good] = cfg.optimal_reward
    return rewards, nxt


def comblock_latent_step(cfg: ComblockConfig, latent: LatentState, action: int,
                         rng: np.random.Generator) -> tuple[float, LatentState]:
    if not 0 <= action < cfg.n_latent_actions:
        raise ValueError(f"latent action {action} out of range")
    r, nxt = _latent_step_batch(cfg, latent.h, [latent.index], [action], rng)
    return float(r[0]), LatentState(latent.h + 1, int(nxt[0]))


def _scaled_hadamard(dim: int) -> np.ndarray:
    return hadamard(dim).astype(float) / math.sqrt(dim)


def emit_observations(cfg: ComblockConfig, states, h: int, rng: np.random.Generator | None) -> np.ndarray:
    """Batched emission.  ``h == horizon`` (terminal) leaves the step block empty."""
    states = np.asarray(states, dtype=int)
    n = states.shape[0]
    dim = cfg.obs_dim
    x = np.zeros((n, dim))
    x[np.arange(n), states] = 1.0
    if h < cfg.horizon:
        x[:, N_LATENT + h] = 1.0
    if cfg.noise_std > 0:
        x += cfg.noise_std * rng.standard_normal(x.shape)
    return x @ _scaled_hadamard(dim).T


def emit_observation(cfg: ComblockConfig, latent: LatentState, rng: np.random.Generator | None) -> np.ndarray:
    return emit_observations(cfg, [latent.index], latent.h, rng)[0]


def decode_observation(cfg: ComblockConfig, obs) -> np.ndarray:
    """Undo the rotation: returns the padded one-hot block (plus rotated noise)."""
    return np.asarray(obs) @ _scaled_hadamard(cfg.obs_dim)


def decode_continuous_action(a, rng: np.random.Generator) -> np.ndarray | int:
    """Sample latent indices from ``softmax(a)``; accepts one vector or a batch."""
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("continuous action must be finite")
    idx = _sample_rows(softmax(np.atleast_2d(a), axis=1), rng)
    return int(idx[0]) if a.ndim == 1 else idx


class ComblockEnv:
    """Batched latent-state environment; wrap with :class:`FiniteHorizonAdapter`."""

    def __init__(self, cfg: ComblockConfig):
        self.cfg = cfg
        self.n_samples = 0

    @property
    def horizon(self) -> int:
        return self.cfg.horizon

    def reset_states(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, 2, size=n)

    def observe(self, states, h: int, rng: np.random.Generator) -> np.ndarray:
        return emit_observations(self.cfg, states, h, rng)

    def latent_actions(self, actions, rng: np.random.Generator) -> np.ndarray:
        if self.cfg.continuous_actions:
            return decode_continuous_action(np.atleast_2d(actions), rng)
        return np.asarray(actions, dtype=int)

    def step(self, states, actions, rng: np.random.Generator, h: int = 0):
        states = np.asarray(states, dtype=int)
        latent = self.latent_actions(actions, rng)
        self.n_samples += states.shape[0]
        return _latent_step_batch(self.cfg, h, states, latent, rng)


def make_env(cfg: ComblockConfig) -> FiniteHorizonAdapter:
    return FiniteHorizonAdapter(ComblockEnv(cfg), cfg.horizon)


class AlwaysGoodPolicy:
    """Scripted policy that reads the latent state; used for sanity checks."""

    def __init__(self, cfg: ComblockConfig, h: int, latent_source):
        self.cfg, self.h, self.latent_source = cfg, h, latent_source

    def sample(self, obs, rng):
        states = self.latent_source(obs)
        idx = self.cfg.good_table[self.h][np.minimum(states, 1)]
        if self.cfg.continuous_actions:
            return 50.0 * np.eye(self.cfg.n_latent_actions)[idx]
        return idx


def latent_from_obs(cfg: ComblockConfig):
    """Recover latent indices from (possibly noisy) observations by argmax decoding."""
    def read(obs):
        return np.argmax(decode_observation(cfg, obs)[:, :N_LATENT], axis=1)
    return read


def scripted_good_policies(cfg: ComblockConfig) -> list:
    reader = latent_from_obs(cfg)
    return [AlwaysGoodPolicy(cfg, h, reader) for h in range(cfg.horizon)]


# ---------------------------------------------------------------------------
# offline data


@dataclass
class OfflineDataset:
    """Trajectories of the behaviour policy; arrays indexed ``[trajectory, h]``.

    ``obs`` has ``H + 1`` entries per trajectory (the last is terminal).
    """

    config: ComblockConfig
    epsilon: float
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    latents: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.rewards.shape[0]

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    def to_trajectories(self) -> Trajectories:
        return Trajectories(self.obs[:, :-1], self.actions, self.rewards, self.obs[:, 1:], self.latents)

    def to_step_dataset(self) -> StepDataset:
        return StepDataset.from_trajectories(self.to_trajectories())

    def save(self, path) -> None:
        header = {"config": self.config.to_dict(), "epsilon": self.epsilon, "size": self.size}
        with open(path, "w") as fh:
            fh.write(json.dumps(header) + "\n")
            for i in range(self.size):
                row = {"obs": self.obs[i].tolist(), "action": self.actions[i].tolist(),
                       "reward": self.rewards[i].tolist()}
                if self.latents is not None:
                    row["latent"] = self.latents[i].tolist()
                fh.write(json.dumps(row) + "\n")

    @classmethod
    def load(cls, path) -> "OfflineDataset":
        with open(path) as fh:
            header = json.loads(fh.readline())
            rows = [json.loads(line) for line in fh if line.strip()]
        cfg = ComblockConfig.from_dict(header["config"])
        if len(rows) != header["size"]:
            raise ValueError(f"header says {header['size']} trajectories, file has {len(rows)}")
        latents = np.array([r["latent"] for r in rows], dtype=int) if rows and "latent" in rows[0] else None
        return cls(cfg, header["epsilon"],
                   np.array([r["obs"] for r in rows], dtype=float),
                   np.array([r["action"] for r in rows], dtype=float if cfg.continuous_actions else int),
                   np.array([r["reward"] for r in rows], dtype=float),
                   latents)


def generate_offline_dataset(cfg: ComblockConfig, epsilon: float | None, n_trajectories: int,
                             rng: np.random.Generator) -> OfflineDataset:
    """Roll an epsilon-greedy behaviour policy.

    With probability ``1 - epsilon`` the good latent action is taken, else one
    of the other ``n_latent_actions - 1`` actions uniformly.  In the dead state
    the behaviour action is uniform.  Continuous actions are logged as
    ``10 * e_i``.
    """
    eps = 1.0 / cfg.horizon if epsilon is None else epsilon
    if not 0.0 <= eps < 1.0:
        raise ValueError("epsilon must lie in [0, 1)")
    H, K, n = cfg.horizon, cfg.n_latent_actions, n_trajectories
    states = rng.integers(0, 2, size=n)
    obs = [emit_observations(cfg, states, 0, rng)]
    acts, rews, lats = [], [], []
    for h in range(H):
        lats.append(states)
        good = cfg.good_table[h][np.minimum(states, 1)]
        other = rng.integers(0, K - 1, size=n)
        other = other + (other >= good)
        explore = rng.random(n) < eps
        chosen = np.where(explore, other, good)
        dead = states == DEAD
        chosen[dead] = rng.integers(0, K, size=int(dead.sum()))
        r, states = _latent_step_batch(cfg, h, states, chosen, rng)
        acts.append(chosen)
        rews.append(r)
        obs.append(emit_observations(cfg, states, h + 1, rng))
    latent_actions = np.stack(acts, axis=1)
    actions = 10.0 * np.eye(K)[latent_actions] if cfg.continuous_actions else latent_actions
    return OfflineDataset(cfg, eps, np.stack(obs, axis=1), actions, np.stack(rews, axis=1),
                          np.stack(lats, axis=1), {"latent_actions": latent_actions})


def fraction_optimal(dataset) -> float:
    """Share of trajectories whose final reward equals the optimal reward (1)."""
    rewards = dataset.rewards
    if rewards.shape[0] == 0:
        return 0.0
    return float(np.mean(rewards[:, -1] >= 1.0))


class ContinuousBandit:
    """One-state bandit whose real action vector is decoded by ``softmax``.

    ``expected_reward(obs, a) = softmax(a) . rewards``; used as a small exact
    testbed for the parameterised NPG driver.
    """

    discount = 0.0
    obs_dim = 1

    def __init__(self, rewards):
        self.rewards = np.asarray(rewards, dtype=float)
        self.n_samples = 0

    def expected_reward(self, obs, actions) -> np.ndarray:
        return softmax(np.atleast_2d(actions), axis=1) @ self.rewards

    def sample_on_policy(self, policy, n: int, rng: np.random.Generator):
        obs = np.zeros((n, 1))
        self.n_samples += n
        return obs, policy.sample(obs, rng)

    def mean_return(self, policy, n: int, rng: np.random.Generator) -> float:
        obs = np.zeros((n, 1))
        return float(np.mean(self.expected_reward(obs, policy.sample(obs, rng))))
