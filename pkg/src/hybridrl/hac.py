"""Hybrid actor-critic with multiplicative-weights (softmax) policy updates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .funcapprox import softmax
from .hpe import HpeConfig, hpe
from .mdp import TabularMdp, _sample_rows, function_table, tabular_v_exact


class SoftmaxPolicy:
    """``pi(a|s) ∝ exp(L(s, a))`` for an accumulated logit function ``L``.

    With ``n_states`` known the logits are kept as an (S, A) table; otherwise
    they are the lazy sum ``sum_k eta_k f_k(s, a)`` of stored critics.
    """

    def __init__(self, n_actions: int, logits: np.ndarray | None = None, terms=()):
        self._n_actions = n_actions
        self.logits = None if logits is None else np.asarray(logits, dtype=float)
        self.terms = tuple(terms)

    @classmethod
    def uniform(cls, n_actions: int, n_states: int | None = None) -> "SoftmaxPolicy":
        logits = None if n_states is None else np.zeros((n_states, n_actions))
        return cls(n_actions, logits)

    @property
    def n_actions(self) -> int:
        return self._n_actions

    def logit(self, states) -> np.ndarray:
        states = np.asarray(states)
        if self.logits is not None:
            return self.logits[states]
        n = states.shape[0]
        out = np.zeros((n, self._n_actions))
        if self.terms:
            rep = np.repeat(states, self._n_actions, axis=0)
            acts = np.tile(np.arange(self._n_actions), n)
            for eta, f in self.terms:
                out += eta * np.asarray(f(rep, acts)).reshape(n, self._n_actions)
        return out

    def probs(self, states) -> np.ndarray:
        return softmax(self.logit(states), axis=1)

    @property
    def table(self) -> np.ndarray:
        if self.logits is None:
            raise AttributeError("lazy softmax policy has no table")
        return softmax(self.logits, axis=1)

    def sample(self, states, rng: np.random.Generator) -> np.ndarray:
        return _sample_rows(self.probs(states), rng)


def softmax_update(policy: SoftmaxPolicy, f, eta: float) -> SoftmaxPolicy:
    """Return the policy with logits ``L + eta * f``; ``policy`` is left untouched."""
    if policy.logits is not None:
        S, A = policy.logits.shape
        table = f if isinstance(f, np.ndarray) else function_table(f, S, A)
        return SoftmaxPolicy(policy.n_actions, policy.logits + eta * np.asarray(table, dtype=float))
    return SoftmaxPolicy(policy.n_actions, None, policy.terms + ((eta, f),))


class MixturePolicy:
    """Uniform mixture; one component is drawn per episode."""

    def __init__(self, components):
        self.components = list(components)
        self.weights = np.full(len(self.components), 1.0 / len(self.components))

    def draw(self, rng: np.random.Generator):
        return self.components[rng.integers(len(self.components))]


def mixture_value(mdp: TabularMdp, mixture: MixturePolicy) -> float:
    """Exact expected discounted return of a per-episode mixture."""
    return float(sum(w * tabular_v_exact(mdp, pi) for w, pi in zip(mixture.weights, mixture.components)))


@dataclass
class HacConfig:
    T: int = 50
    eta: float | None = None
    hpe: HpeConfig = field(default_factory=HpeConfig)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.eta is not None and self.eta <= 0:
            raise ValueError("eta must be positive")

    def step_size(self, gamma: float, n_actions: int) -> float:
        if self.eta is not None:
            return self.eta
        return (1.0 - gamma) * math.sqrt(math.log(n_actions) / self.T)


@dataclass
class HacResult:
    iterates: list
    mixture: MixturePolicy
    critics: list
    records: list


def run_hac(env, fclass, offline_source, cfg: HacConfig, rng: np.random.Generator,
            critic=None, mdp: TabularMdp | None = None, callback=None) -> HacResult:
    """Alternate hybrid policy evaluation with softmax policy updates for ``cfg.T`` rounds.

    ``critic(policy)``, when given, replaces the evaluation step (used for
    oracle experiments).  With ``mdp`` the exact value of each iterate is
    recorded.  ``callback(record, new_policy)`` is called after each update.
    """
    mdp = mdp if mdp is not None else getattr(env, "mdp", None)
    n_actions = env.n_actions
    gamma = env.discount
    eta = cfg.step_size(gamma, n_actions)
    policy = SoftmaxPolicy.uniform(n_actions, None if mdp is None else mdp.n_states)
    iterates, critics, records = [policy], [], []
    for t in range(1, cfg.T + 1):
        if critic is not None:
            f, losses = critic(policy), []
        else:
            res = hpe(policy, fclass, offline_source, env, cfg.hpe, rng)
            f, losses = res.f, res.losses
        record = {"t": t, "hpe_losses": losses[-1] if losses else {}}
        if mdp is not None:
            record["mean_return_of_pi_t"] = tabular_v_exact(mdp, policy)
        records.append(record)
        critics.append(f)
        policy = softmax_update(policy, f, eta)
        iterates.append(policy)
        if callback is not None:
            callback(record, policy)
    return HacResult(iterates, MixturePolicy(iterates), critics, records)
