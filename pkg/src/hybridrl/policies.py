"""Differentiable policies exposing score functions, closed-form KL and sampling."""

from __future__ import annotations

import numpy as np

from .funcapprox import Mlp, softmax
from .mdp import _sample_rows

LOG_2PI = np.log(2.0 * np.pi)


class TabularSoftmaxParamPolicy:
    """``pi_theta(a|s) = softmax(theta[s])`` with ``theta`` flattened to length S*A."""

    def __init__(self, n_states: int, n_actions: int, theta=None):
        self.n_states = n_states
        self._n_actions = n_actions
        self.theta = np.zeros(n_states * n_actions) if theta is None else np.asarray(theta, dtype=float).copy()

    @property
    def n_actions(self) -> int:
        return self._n_actions

    @property
    def params(self) -> np.ndarray:
        return self.theta

    def with_params(self, theta) -> "TabularSoftmaxParamPolicy":
        return TabularSoftmaxParamPolicy(self.n_states, self._n_actions, theta)

    @property
    def table(self) -> np.ndarray:
        return softmax(self.theta.reshape(self.n_states, self._n_actions), axis=1)

    def probs(self, states) -> np.ndarray:
        return self.table[np.asarray(states)]

    def sample(self, states, rng: np.random.Generator) -> np.ndarray:
        return _sample_rows(self.probs(states), rng)

    def log_prob(self, states, actions) -> np.ndarray:
        return np.log(self.probs(states)[np.arange(len(actions)), np.asarray(actions)])

    def score(self, states, actions) -> np.ndarray:
        """Rows ``grad_theta log pi(a|s) = e_s ⊗ (e_a - pi(.|s))``."""
        states = np.asarray(states)
        actions = np.asarray(actions)
        n, A = len(states), self._n_actions
        block = -self.probs(states)
        block[np.arange(n), actions] += 1.0
        out = np.zeros((n, self.n_states, A))
        out[np.arange(n), states] = block
        return out.reshape(n, -1)

    def kl(self, other: "TabularSoftmaxParamPolicy", states) -> float:
        p, q = self.probs(states), other.probs(states)
        return float(np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=1)))

    def kl_quadratic(self, w: np.ndarray, states) -> float:
        """``w^T H w`` for the Hessian of ``KL(pi_theta || pi_theta+w)`` averaged over states."""
        p = self.probs(states)
        dw = w.reshape(self.n_states, self._n_actions)[np.asarray(states)]
        mean = np.sum(p * dw, axis=1, keepdims=True)
        return float(np.mean(np.sum(p * (dw - mean) ** 2, axis=1)))


class GaussianMlpPolicy:
    """Diagonal Gaussian with an MLP mean and a state-independent log-std.

    The parameter vector is ``concat(mean_net.params, log_std)``.
    """

    def __init__(self, net: Mlp, log_std):
        self.net = net
        self.log_std = np.asarray(log_std, dtype=float).copy()

    @classmethod
    def create(cls, obs_dim: int, action_dim: int, hidden=(32, 32), rng=None,
               init_log_std: float = 0.0, out_scale: float = 0.01) -> "GaussianMlpPolicy":
        net = Mlp((obs_dim, *hidden, action_dim), rng, out_scale=out_scale)
        return cls(net, np.full(action_dim, init_log_std))

    @property
    def action_dim(self) -> int:
        return self.log_std.size

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.net.params, self.log_std])

    def with_params(self, theta) -> "GaussianMlpPolicy":
        theta = np.asarray(theta, dtype=float)
        k = self.net.n_params
        return GaussianMlpPolicy(Mlp(self.net.sizes, params=theta[:k]), theta[k:])

    def _obs(self, states) -> np.ndarray:
        return np.asarray(states, dtype=float).reshape(-1, self.net.sizes[0])

    def mean(self, states) -> np.ndarray:
        return self.net(self._obs(states))

    def sample(self, states, rng: np.random.Generator) -> np.ndarray:
        mu = self.mean(states)
        return mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)

    def actions_from_noise(self, states, noise: np.ndarray) -> np.ndarray:
        return self.mean(states) + np.exp(self.log_std) * noise

    def log_prob(self, states, actions) -> np.ndarray:
        mu = self.mean(states)
        z = (np.asarray(actions) - mu) / np.exp(self.log_std)
        return -0.5 * np.sum(z ** 2, axis=1) - np.sum(self.log_std) - 0.5 * self.action_dim * LOG_2PI

    def score(self, states, actions) -> np.ndarray:
        """Per-sample ``grad_theta log pi(a|s)``, shape (n, n_params)."""
        mu, acts = self.net.forward(self._obs(states))
        var = np.exp(2.0 * self.log_std)
        diff = np.asarray(actions) - mu
        g_net = self.net.per_sample_grads(acts, diff / var)
        g_std = diff ** 2 / var - 1.0
        return np.concatenate([g_net, g_std], axis=1)

    def kl(self, other: "GaussianMlpPolicy", states) -> float:
        """Mean over states of ``KL(self || other)`` in closed form."""
        obs = self._obs(states)
        mu0, mu1 = self.net(obs), other.net(obs)
        var0, var1 = np.exp(2 * self.log_std), np.exp(2 * other.log_std)
        per_dim = other.log_std - self.log_std + (var0 + (mu0 - mu1) ** 2) / (2 * var1) - 0.5
        return float(np.mean(np.sum(per_dim, axis=1)))

    def kl_quadratic(self, w: np.ndarray, states) -> float:
        """``w^T H w`` where ``H`` is the Hessian of the mean KL at ``w = 0``."""
        k = self.net.n_params
        dmu = self.net.jvp(self._obs(states), w[:k])
        var = np.exp(2 * self.log_std)
        return float(np.mean(np.sum(dmu ** 2 / var, axis=1)) + 2.0 * np.sum(w[k:] ** 2))
